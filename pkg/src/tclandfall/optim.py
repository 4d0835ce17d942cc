"""Adam with bias correction, applied in place to :class:`~tclandfall.autodiff.Tensor` parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from tclandfall.autodiff import Tensor
from tclandfall.errors import ShapeError


def adam_step(
    params: Sequence[Tensor],
    m: Sequence[np.ndarray],
    v: Sequence[np.ndarray],
    t: int,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update at step ``t`` (1-based); moments ``m``/``v`` are updated in place.

    Parameters without a gradient are treated as having a zero gradient.
    Gradients are left untouched.
    """
    if t < 1:
        raise ValueError(f"adam step index must be >= 1, got {t}")
    if not len(params) == len(m) == len(v):
        raise ShapeError(f"adam: {len(params)} params but {len(m)}/{len(v)} moment buffers")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, mi, vi in zip(params, m, v):
        if mi.shape != p.shape or vi.shape != p.shape:
            raise ShapeError(f"adam: state shape {mi.shape}/{vi.shape} does not match parameter {p.shape}")
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p.data -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


class Adam:
    """Keeps the per-parameter moments and the step counter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.m, self.v, self.t, self.lr, self.beta1, self.beta2, self.eps)
