import struct

import numpy as np
import pytest

from tclandfall.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from tclandfall.errors import DataFormatError
from tclandfall.nn import LandfallModel, ModelConfig
from tclandfall.scaling import ScalerStats

CFG = ModelConfig(n_steps=4, head_width=1, grid_size=8, conv_channels=(2,), encoder_width=4,
                  lstm_sizes=(4, 3), head_hidden=4)


def stats():
    return ScalerStats(np.arange(12.0), np.linspace(1, 2, 12), np.array([15.0, 85.0]), np.array([3.0, 4.0]), False)


def test_round_trip_bit_exact(tmp_path):
    model = LandfallModel(CFG, seed=3)
    save_checkpoint(tmp_path / "m.tcck", model, stats(), {"epochs": 3, "val_mse": [0.5]})
    back, st, meta = load_checkpoint(tmp_path / "m.tcck")
    assert back.config == model.config
    for k, v in model.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()
    assert st.channel_std.tobytes() == stats().channel_std.tobytes() and st.scale_latlon is False
    assert meta == {"epochs": 3, "val_mse": [0.5]}
    save_checkpoint(tmp_path / "n.tcck", back, st, meta)
    assert (tmp_path / "m.tcck").read_bytes() == (tmp_path / "n.tcck").read_bytes()


def test_predictions_survive(rng):
    model = LandfallModel(CFG, seed=5)
    back, _, _ = decode_checkpoint(encode_checkpoint(model))
    x = rng.normal(size=(2, 4, 12, 8, 8))
    assert model.predict(x).tobytes() == back.predict(x).tobytes()


def test_without_scaler():
    _, st, meta = decode_checkpoint(encode_checkpoint(LandfallModel(CFG)))
    assert st is None and meta == {}


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-8], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:2], "truncated"),
])
def test_corruption(mutate, match):
    buf = encode_checkpoint(LandfallModel(CFG), stats())
    with pytest.raises(DataFormatError, match=match):
        decode_checkpoint(mutate(buf))
