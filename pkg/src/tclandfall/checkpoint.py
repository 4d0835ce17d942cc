"""Model checkpoint file.

Layout (integers unsigned 32-bit little-endian)::

    b"TCCK" | version | header_len | JSON header (utf-8, sorted keys)
    | float64 LE arrays in header order: every parameter, then the scaler arrays

The header carries the architecture descriptor (layer sizes, T, head width,
channel order), the name and shape of each stored array, and free-form
metadata such as the training history.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from tclandfall.errors import DataFormatError
from tclandfall.nn import LandfallModel, ModelConfig
from tclandfall.scaling import ScalerStats

MAGIC = b"TCCK"
VERSION = 1
_PRE = struct.Struct("<4sII")
_SCALER_FIELDS = ("channel_mean", "channel_std", "target_mean", "target_std")


def encode_checkpoint(model: LandfallModel, stats: ScalerStats | None = None, meta: dict | None = None) -> bytes:
    arrays = list(model.state_dict().items())
    if stats is not None:
        arrays += [(f"scaler.{f}", np.asarray(getattr(stats, f), dtype=np.float64)) for f in _SCALER_FIELDS]
    header = {
        "architecture": model.config.to_dict(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "scaler": None if stats is None else {"scale_latlon": bool(stats.scale_latlon)},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _PRE.pack(MAGIC, VERSION, len(blob)) + blob + body


def decode_checkpoint(buf: bytes) -> tuple[LandfallModel, ScalerStats | None, dict]:
    if len(buf) < _PRE.size:
        raise DataFormatError("checkpoint truncated before header")
    magic, version, hlen = _PRE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[_PRE.size:_PRE.size + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["architecture"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"corrupt checkpoint header ({exc})") from None
    off = _PRE.size + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape, dtype=np.int64))
        if off + 8 * count > len(buf):
            raise DataFormatError(f"checkpoint truncated in array {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(buf):
        raise DataFormatError(f"checkpoint has {len(buf) - off} trailing bytes")

    model = LandfallModel(config)
    try:
        model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("scaler.")})
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"checkpoint parameters do not match architecture ({exc})") from None
    stats = None
    if header.get("scaler") is not None:
        stats = ScalerStats(**{f: arrays[f"scaler.{f}"] for f in _SCALER_FIELDS},
                            scale_latlon=bool(header["scaler"]["scale_latlon"]))
    return model, stats, header.get("meta", {})


def save_checkpoint(path, model: LandfallModel, stats: ScalerStats | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, stats, meta))


def load_checkpoint(path) -> tuple[LandfallModel, ScalerStats | None, dict]:
    return decode_checkpoint(Path(path).read_bytes())
