"""Seeded synthetic cyclones standing in for reanalysis + best-track archives.

Each storm drifts toward a straight coastline along a fixed meridian east of
its genesis point, with a heading that turns at a constant rate plus a little
noise. The gridded fields are an idealised vortex (zero wind in the eye) riding
on a steering flow that points where the storm is heading, a geopotential
depression with a matching background gradient, and a smooth SST field that is
missing (then mean-filled) over land.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from tclandfall.geo import EARTH_RADIUS_KM, GRID_SIZE, GRID_STEP_DEG, GeoPoint, distance_to_meridian_km
from tclandfall.ingest import (
    BASINS,
    STEP,
    Track,
    TrackPoint,
    fill_missing_sst,
    write_fields,
    write_tracks,
)

KM_PER_DEG = np.pi * EARTH_RADIUS_KM / 180.0

# basin -> (genesis latitude band, coastline meridian)
BASIN_GEOMETRY = {
    "NI": ((9.0, 18.0), 86.0),
    "SI": ((-20.0, -11.0), 47.0),
    "EP": ((13.0, 21.0), -97.0),
    "SP": ((-21.0, -12.0), 153.0),
    "WP": ((12.0, 24.0), 121.0),
    "NA": ((16.0, 27.0), -80.0),
}

LEVELS = (225, 500, 700)
_VMAX = {225: 14.0, 500: 28.0, 700: 38.0}  # m/s
_Z_BASE = {225: 108_000.0, 500: 55_900.0, 700: 29_900.0}  # m^2/s^2
_Z_DEPTH = {225: 150.0, 500: 450.0, 700: 700.0}
_EPOCH = datetime(1990, 1, 1, tzinfo=timezone.utc)


@dataclass
class SyntheticStorm:
    """Generator parameters kept for inspection in tests."""

    sid: str
    n_ocean: int
    speed_kmh: float
    heading_deg: float
    turn_deg: float
    intensity: float
    rmax_km: float


def _grid_offsets():
    # lats vary along axis 1, longs along axis 0, matching build_latlon_channels
    k = GRID_STEP_DEG * np.arange(-(GRID_SIZE // 2), GRID_SIZE // 2 + 1)
    dlon = np.broadcast_to(k[:, None], (GRID_SIZE, GRID_SIZE))
    dlat = np.broadcast_to(k[None, :], (GRID_SIZE, GRID_SIZE))
    return dlat, dlon


def _snapshot(rng, lat, lon, coast_lon, motion_uv, storm: SyntheticStorm) -> np.ndarray:
    dlat, dlon = _grid_offsets()
    y_km = dlat * KM_PER_DEG
    x_km = dlon * KM_PER_DEG * np.cos(np.radians(lat))
    r = np.hypot(x_km, y_km)
    with np.errstate(invalid="ignore", divide="ignore"):
        ex = np.where(r > 0, -y_km / r, 0.0)
        ey = np.where(r > 0, x_km / r, 0.0)
    spin = 1.0 if lat >= 0 else -1.0
    envelope = 1.0 - np.exp(-((r / 150.0) ** 2))
    us, vs = motion_uv

    out = np.empty((10, GRID_SIZE, GRID_SIZE))
    for li, level in enumerate(LEVELS):
        vt = storm.intensity * _VMAX[level] * (r / storm.rmax_km) * np.exp(1.0 - r / storm.rmax_km)
        u = spin * vt * ex + envelope * us
        v = spin * vt * ey + envelope * vs
        z = (
            _Z_BASE[level]
            - storm.intensity * _Z_DEPTH[level] * np.exp(-((r / (2.0 * storm.rmax_km)) ** 2))
            + spin * 0.8 * (us * y_km - vs * x_km)
            - 2.5 * (np.abs(lat + dlat) - 15.0)
        )
        out[3 * li] = u + rng.normal(0.0, 0.3, u.shape)
        out[3 * li + 1] = v + rng.normal(0.0, 0.3, v.shape)
        out[3 * li + 2] = z + rng.normal(0.0, 3.0, z.shape)
    sst = 302.0 - 0.12 * (np.abs(lat + dlat) - 10.0)
    sst = sst + rng.normal(0.0, 0.05, sst.shape)
    sst[(lon + dlon) >= coast_lon] = np.nan
    out[9] = sst
    return out


def synthesize_basin(seed: int, n_cyclones: int, basin: str = "NI") -> tuple[list[Track], dict[str, np.ndarray]]:
    """Deterministic synthetic tracks plus ``{unit id: [T_L,10,33,33] float32}`` fields.

    Every storm forms over water, spends 24-120 h (8-40 fixes) at sea, makes
    one landfall and then lingers three fixes over land.
    """
    if n_cyclones < 1:
        raise ValueError(f"n_cyclones must be >= 1, got {n_cyclones}")
    if basin not in BASINS:
        raise ValueError(f"unknown basin {basin!r}")
    (lat_lo, lat_hi), coast = BASIN_GEOMETRY[basin]
    rng = np.random.default_rng(seed)
    tracks: list[Track] = []
    fields: dict[str, np.ndarray] = {}
    for i in range(n_cyclones):
        storm = SyntheticStorm(
            sid=f"SYN{basin}{seed:04d}{i:04d}",
            n_ocean=int(rng.integers(8, 41)),
            speed_kmh=float(rng.uniform(12.0, 28.0)),
            heading_deg=float(rng.uniform(-50.0, 50.0)),
            turn_deg=float(rng.uniform(-4.0, 4.0)),
            intensity=float(rng.uniform(0.7, 1.3)),
            rmax_km=float(rng.uniform(50.0, 100.0)),
        )
        n_total = storm.n_ocean + 3
        lat0 = float(rng.uniform(lat_lo, lat_hi))

        headings = storm.heading_deg + storm.turn_deg * np.arange(n_total) + rng.normal(0.0, 1.0, n_total)
        headings = np.clip(headings, -75.0, 75.0)
        speeds = storm.speed_kmh * (1.0 + rng.normal(0.0, 0.03, n_total))
        lats = np.empty(n_total)
        rel_lons = np.empty(n_total)
        lats[0], rel_lons[0] = lat0, 0.0
        for k in range(1, n_total):
            step_km = 3.0 * speeds[k - 1]
            th = np.radians(headings[k - 1])
            lats[k] = lats[k - 1] + step_km * np.sin(th) / KM_PER_DEG
            rel_lons[k] = rel_lons[k - 1] + step_km * np.cos(th) / (KM_PER_DEG * np.cos(np.radians(lats[k - 1])))

        # put the coast between fix n_ocean-1 (last at sea) and fix n_ocean (landfall)
        n = storm.n_ocean
        frac = float(rng.uniform(0.05, 1.0))
        coast_rel = rel_lons[n - 1] + frac * (rel_lons[n] - rel_lons[n - 1])
        lons = coast - coast_rel + rel_lons
        dist = np.where(lons >= coast, 0.0, distance_to_meridian_km(lats, lons, coast))

        start = _EPOCH + STEP * int(rng.integers(0, 30 * 365 * 8))
        points = [
            TrackPoint(time=start + k * STEP, position=GeoPoint(float(lats[k]), float(lons[k])),
                       dist_to_land=float(dist[k]))
            for k in range(n_total)
        ]
        tracks.append(Track(sid=storm.sid, name=f"SYN{i:03d}", basin=basin, points=points))

        snaps = np.empty((n, 10, GRID_SIZE, GRID_SIZE))
        for k in range(n):
            future = np.radians(headings[k] + 2.0 * storm.turn_deg)
            ms = speeds[k] / 3.6
            snaps[k] = _snapshot(rng, lats[k], lons[k], coast,
                                 (ms * np.cos(future), ms * np.sin(future)), storm)
        fields[f"{storm.sid}_01"] = fill_missing_sst(snaps)
    return tracks, fields


def write_synthetic(out_dir, seed: int, n_cyclones: int, basin: str = "NI") -> tuple[Path, Path]:
    """Write ``tracks.csv`` and a ``fields/`` archive under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tracks, fields = synthesize_basin(seed, n_cyclones, basin)
    track_path = out / "tracks.csv"
    write_tracks(track_path, tracks)
    archive = out / "fields"
    for uid in sorted(fields):
        write_fields(archive, uid, fields[uid])
    return track_path, archive
