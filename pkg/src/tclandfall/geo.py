"""Geographic helpers: points, great-circle distance and the lat/long input channels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0088
GRID_SIZE = 33
GRID_STEP_DEG = 0.25
_HALF = GRID_SIZE // 2


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    return (float(lon) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not math.isfinite(lat) or not math.isfinite(lon):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on a sphere of mean Earth radius."""
    return float(haversine_km_array(a.lat, a.lon, b.lat, b.lon))


def haversine_km_array(lat1, lon1, lat2, lon2):
    """Vectorised haversine over arrays of degrees; longitudes need not be wrapped."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def distance_to_meridian_km(lat, lon, meridian_lon):
    """Shortest great-circle distance from a point to the meridian great circle at ``meridian_lon``."""
    lat = np.radians(np.asarray(lat, dtype=np.float64))
    dlon = np.radians(np.asarray(lon, dtype=np.float64) - meridian_lon)
    return EARTH_RADIUS_KM * np.abs(np.arcsin(np.clip(np.sin(dlon) * np.cos(lat), -1.0, 1.0)))


@dataclass(frozen=True)
class LatLonChannels:
    lats: np.ndarray
    longs: np.ndarray


def build_latlon_channels(center: GeoPoint | tuple[float, float]) -> LatLonChannels:
    """Coordinate grids centred on a storm fix.

    Every row of ``lats`` is ``lat + 0.25*k`` and every column of ``longs`` is
    ``lon + 0.25*k`` for ``k`` in ``-16..16``. A ``(lat, lon)`` tuple is taken
    verbatim so that callers can pass unwrapped longitudes (e.g. 182.0) and
    keep the channel smooth across the antimeridian.
    """
    if isinstance(center, GeoPoint):
        lat, lon = center.lat, center.lon
    else:
        lat, lon = float(center[0]), float(center[1])
    offsets = GRID_STEP_DEG * np.arange(-_HALF, _HALF + 1, dtype=np.float64)
    lats = np.tile(lat + offsets, (GRID_SIZE, 1))
    longs = np.tile((lon + offsets)[:, None], (1, GRID_SIZE))
    return LatLonChannels(lats=lats, longs=longs)
