"""Sliding windows over cyclone units, unit-level splits and the prepared-dataset file."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tclandfall.errors import DataFormatError, UsageError
from tclandfall.geo import GRID_SIZE, GeoPoint, build_latlon_channels
from tclandfall.ingest import FIELD_CHANNELS, CycloneUnit, TrackPoint, format_time, parse_time

log = logging.getLogger(__name__)

ALLOWED_T = (4, 6, 8)
LEAD_GUARD_HOURS = 12.0
N_FOLDS = 5
BUCKETS = ("train", "val", "test")


def window_hours_to_steps(hours: int) -> int:
    """9/15/21 hours of data -> T = 4/6/8 fixes."""
    if hours % 3 or hours // 3 + 1 not in ALLOWED_T:
        raise UsageError(f"window hours must be one of 9, 15, 21; got {hours}")
    return hours // 3 + 1


def steps_to_window_hours(n_steps: int) -> int:
    return 3 * (n_steps - 1)


@dataclass
class Sample:
    """One model input: ``window[T,12,33,33]`` and its landfall targets.

    ``positions`` holds the (lat, unwrapped lon) of each fix in the window and
    ``dist_to_land`` the matching track distances; both feed the persistence
    baseline only.
    """

    unit_id: str
    k: int
    window: np.ndarray
    t_end: datetime
    hours_since_formation: float
    target_location: tuple[float, float]
    target_hours: float
    positions: np.ndarray
    dist_to_land: np.ndarray


def unit_frames(unit: CycloneUnit, snapshots: np.ndarray) -> np.ndarray:
    """Stack the lats/longs channels in front of the ten stored channels for every ocean fix."""
    snaps = np.asarray(snapshots)
    if snaps.shape != (unit.n_ocean, len(FIELD_CHANNELS), GRID_SIZE, GRID_SIZE):
        raise DataFormatError(
            f"unit {unit.id}: snapshots {snaps.shape} do not match {unit.n_ocean} ocean points x 10x33x33"
        )
    lons = unit.unwrapped_lons()
    frames = np.empty((unit.n_ocean, 12, GRID_SIZE, GRID_SIZE), dtype=np.float32)
    for i, p in enumerate(unit.ocean_points):
        ch = build_latlon_channels((p.position.lat, lons[i]))
        frames[i, 0] = ch.lats
        frames[i, 1] = ch.longs
    frames[:, 2:] = snaps
    return frames


def _samples_from_frames(unit: CycloneUnit, frames: np.ndarray, n_steps: int) -> tuple[list[Sample], int]:
    t_l = unit.n_ocean
    lons = unit.unwrapped_lons()
    lats = np.array([p.position.lat for p in unit.ocean_points])
    dists = np.array([p.dist_to_land for p in unit.ocean_points])
    target = (unit.landfall.position.lat, float(lons[-1]))
    start = unit.ocean_points[0].time
    samples, dropped = [], 0
    for k in range(1, max(0, t_l - n_steps - 2) + 1):
        lo, hi = k - 1, k - 1 + n_steps
        t_end = unit.ocean_points[hi - 1].time
        hours = (unit.landfall_time - t_end).total_seconds() / 3600.0
        if hours < LEAD_GUARD_HOURS:
            dropped += 1
            continue
        samples.append(Sample(
            unit_id=unit.id,
            k=k,
            window=frames[lo:hi],
            t_end=t_end,
            hours_since_formation=(t_end - start).total_seconds() / 3600.0,
            target_location=target,
            target_hours=hours,
            positions=np.stack([lats[lo:hi], lons[lo:hi]], axis=1),
            dist_to_land=dists[lo:hi].copy(),
        ))
    return samples, dropped


def window_unit(unit: CycloneUnit, snapshots: np.ndarray, n_steps: int) -> list[Sample]:
    """Windows of ``n_steps`` consecutive fixes starting at k = 1 .. T_L - T - 2.

    Windows ending less than 12 h before landfall are dropped (logged).
    """
    if n_steps not in ALLOWED_T:
        raise UsageError(f"T must be one of {ALLOWED_T}, got {n_steps}")
    samples, dropped = _samples_from_frames(unit, unit_frames(unit, snapshots), n_steps)
    if dropped:
        log.info("unit %s: %d windows dropped by the %gh lead-time guard", unit.id, dropped, LEAD_GUARD_HOURS)
    return samples


def expected_count(t_l: int, n_steps: int) -> int:
    return max(0, t_l - n_steps - 2)


# ---------------------------------------------------------------- splits

@dataclass
class SplitPlan:
    """Unit-level assignment; ``folds`` has one entry for holdout, five for k-fold."""

    mode: str
    seed: int
    folds: list[dict[str, list[str]]]

    def bucket_of(self, unit_id: str, fold: int = 0) -> str:
        for name in BUCKETS:
            if unit_id in self.folds[fold][name]:
                return name
        raise KeyError(unit_id)

    def units(self, fold: int = 0) -> list[str]:
        return sorted(u for name in BUCKETS for u in self.folds[fold][name])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "folds": self.folds}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(mode=d["mode"], seed=int(d["seed"]),
                   folds=[{b: list(f[b]) for b in BUCKETS} for f in d["folds"]])


def make_split(unit_ids: Sequence[str], mode: str = "holdout", seed: int = 0) -> SplitPlan:
    """Seeded 60:20:20 split by unit; ``kfold`` nests a 75:25 train/val split inside each of 5 folds."""
    ids = sorted(set(unit_ids))
    if len(ids) != len(unit_ids):
        raise ValueError("duplicate unit ids")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    if mode == "holdout":
        if n < 3:
            raise UsageError(f"holdout split needs at least 3 units, got {n}")
        n_train = max(1, int(round(0.6 * n)))
        n_val = max(1, int(round(0.2 * n)))
        if n_train + n_val >= n:
            n_train = n - n_val - 1
        folds = [{
            "train": sorted(order[:n_train]),
            "val": sorted(order[n_train:n_train + n_val]),
            "test": sorted(order[n_train + n_val:]),
        }]
    elif mode == "kfold":
        if n < N_FOLDS:
            raise UsageError(f"k-fold split needs at least {N_FOLDS} units, got {n}")
        parts = np.array_split(np.arange(n), N_FOLDS)
        folds = []
        for part in parts:
            test = [order[i] for i in part]
            rest = [u for u in order if u not in set(test)]
            n_val = max(1, int(round(0.25 * len(rest))))
            folds.append({
                "train": sorted(rest[:-n_val]),
                "val": sorted(rest[-n_val:]),
                "test": sorted(test),
            })
    else:
        raise UsageError(f"unknown split mode {mode!r} (expected holdout or kfold)")
    return SplitPlan(mode=mode, seed=seed, folds=folds)


# ---------------------------------------------------------------- prepared dataset

@dataclass
class PreparedDataset:
    """Windows for one T over a set of units, plus the split plan.

    Frames are kept once per unit; each :class:`Sample` window is a view into them.
    """

    n_steps: int
    units: list[CycloneUnit]
    frames: dict[str, np.ndarray]
    samples: list[Sample]
    split: SplitPlan
    dropped: int = 0
    basin: str = ""

    def unit(self, unit_id: str) -> CycloneUnit:
        for u in self.units:
            if u.id == unit_id:
                return u
        raise KeyError(unit_id)

    def bucket(self, name: str, fold: int = 0) -> list[Sample]:
        members = set(self.split.folds[fold][name])
        return [s for s in self.samples if s.unit_id in members]


def prepare_dataset(units: Iterable[CycloneUnit], snapshots: dict[str, np.ndarray], n_steps: int,
                    mode: str = "kfold", seed: int = 0) -> PreparedDataset:
    if n_steps not in ALLOWED_T:
        raise UsageError(f"T must be one of {ALLOWED_T}, got {n_steps}")
    units = sorted(units, key=lambda u: u.id)
    frames, samples, dropped = {}, [], 0
    for u in units:
        frames[u.id] = unit_frames(u, snapshots[u.id])
        s, d = _samples_from_frames(u, frames[u.id], n_steps)
        samples.extend(s)
        dropped += d
    basins = sorted({u.basin for u in units})
    return PreparedDataset(
        n_steps=n_steps,
        units=units,
        frames=frames,
        samples=samples,
        split=make_split([u.id for u in units], mode, seed),
        dropped=dropped,
        basin=",".join(basins),
    )


DATASET_MAGIC = b"TCDS"
DATASET_VERSION = 1
_PRE = struct.Struct("<4sII")


def _unit_to_dict(u: CycloneUnit) -> dict:
    return {
        "id": u.id,
        "basin": u.basin,
        "times": [format_time(p.time) for p in u.ocean_points] + [format_time(u.landfall.time)],
    }


def save_dataset(path, ds: PreparedDataset) -> None:
    """Layout: magic, version, header length (u32 LE), JSON header, then float64 LE unit
    tracks, float32 LE unit frames, float64 LE per-sample targets, all in header order."""
    header = {
        "n_steps": ds.n_steps,
        "basin": ds.basin,
        "dropped": ds.dropped,
        "channels": ["lats", "longs", *FIELD_CHANNELS],
        "units": [_unit_to_dict(u) for u in ds.units],
        "samples": [[s.unit_id, s.k] for s in ds.samples],
        "split": ds.split.to_dict(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PRE.pack(DATASET_MAGIC, DATASET_VERSION, len(blob)))
        fh.write(blob)
        for u in ds.units:
            track = np.array(
                [[p.position.lat, p.position.lon, p.dist_to_land] for p in u.ocean_points]
                + [[u.landfall.position.lat, u.landfall.position.lon, u.landfall.dist_to_land]],
                dtype="<f8",
            )
            fh.write(track.tobytes())
        for u in ds.units:
            fh.write(np.ascontiguousarray(ds.frames[u.id], dtype="<f4").tobytes())
        targets = np.array(
            [[s.target_location[0], s.target_location[1], s.target_hours] for s in ds.samples],
            dtype="<f8",
        ).reshape(len(ds.samples), 3)
        fh.write(targets.tobytes())


def load_dataset(path) -> PreparedDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _PRE.size:
        raise DataFormatError(f"{path}: truncated dataset header")
    magic, version, hlen = _PRE.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DataFormatError(f"{path}: bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported dataset version {version}")
    off = _PRE.size
    try:
        header = json.loads(buf[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt dataset header ({exc})") from None
    off += hlen

    def take(dtype, count):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(buf):
            raise DataFormatError(f"{path}: truncated dataset payload")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    units = []
    for ud in header["units"]:
        n = len(ud["times"])
        track = take("<f8", 3 * n).reshape(n, 3)
        pts = [TrackPoint(time=parse_time(t), position=GeoPoint(float(r[0]), float(r[1])), dist_to_land=float(r[2]))
               for t, r in zip(ud["times"], track)]
        units.append(CycloneUnit(id=ud["id"], basin=ud["basin"], ocean_points=pts[:-1], landfall=pts[-1]))
    frames = {}
    for u in units:
        frames[u.id] = take("<f4", u.n_ocean * 12 * GRID_SIZE * GRID_SIZE).reshape(
            u.n_ocean, 12, GRID_SIZE, GRID_SIZE).astype(np.float32)
    refs = header["samples"]
    targets = take("<f8", 3 * len(refs)).reshape(len(refs), 3)
    if off != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - off} trailing bytes")

    n_steps = int(header["n_steps"])
    by_id = {u.id: u for u in units}
    built: dict[tuple[str, int], Sample] = {}
    for u in units:
        for s in _samples_from_frames(u, frames[u.id], n_steps)[0]:
            built[(s.unit_id, s.k)] = s
    samples = []
    for (uid, k), tgt in zip(refs, targets):
        s = built.get((uid, int(k)))
        if s is None or uid not in by_id:
            raise DataFormatError(f"{path}: sample ({uid}, {k}) does not match its unit")
        s.target_location = (float(tgt[0]), float(tgt[1]))
        s.target_hours = float(tgt[2])
        samples.append(s)
    return PreparedDataset(
        n_steps=n_steps,
        units=units,
        frames=frames,
        samples=samples,
        split=SplitPlan.from_dict(header["split"]),
        dropped=int(header["dropped"]),
        basin=header.get("basin", ""),
    )
