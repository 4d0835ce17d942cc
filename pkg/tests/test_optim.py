import math

import numpy as np
import pytest

from tclandfall.autodiff import Tensor
from tclandfall.errors import ShapeError
from tclandfall.optim import Adam, adam_step


def scalar_adam(grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar re-statement of the bias-corrected update."""
    theta, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_first_step():
    assert scalar_adam([1.0]) == pytest.approx(-0.001, abs=1e-6)
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    opt = Adam([p])
    opt.step()
    assert p.data[0] == pytest.approx(-0.001, abs=1e-6)
    assert p.data[0] == pytest.approx(scalar_adam([1.0]), abs=1e-15)


def test_two_steps():
    assert scalar_adam([1.0, 1.0]) == pytest.approx(-0.002, abs=1e-5)
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p])
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert p.data[0] == pytest.approx(-0.002, abs=1e-5)
    assert p.data[0] == pytest.approx(scalar_adam([1.0, 1.0]), abs=1e-15)


def test_zero_gradient_no_change():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = Adam([p])
    for _ in range(5):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_grads_untouched():
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([0.3])
    Adam([p]).step()
    assert p.grad[0] == 0.3


def test_state_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.ones(3)
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(2)], [np.zeros(2)], t=1)


def test_step_index_positive():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(1)], [np.zeros(1)], t=0)
