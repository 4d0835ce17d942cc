"""Track tables, cyclone units and the binary field archive.

Track file: comma-separated text with header
``sid,name,basin,iso_time,lat,lon,dist2land_km``; rows of one storm are
contiguous and time-sorted, fixes 3 hours apart.

Field archive: a directory holding one ``<unit id>.tclf`` file per cyclone
unit. Each file is, all integers unsigned 32-bit little-endian::

    b"TCLF" | version | id_len | id (utf-8) | n_time | n_channels | height | width
    | float32 LE data, row-major, time-major
"""

from __future__ import annotations

import csv
import logging
import re
import struct
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tclandfall.errors import DataFormatError, NotFoundError
from tclandfall.geo import GRID_SIZE, GeoPoint

log = logging.getLogger(__name__)

BASINS = ("NI", "SI", "EP", "SP", "WP", "NA")
TRACK_COLUMNS = ("sid", "name", "basin", "iso_time", "lat", "lon", "dist2land_km")
STEP = timedelta(hours=3)
MIN_UNIT_HOURS = 21.0

FIELD_CHANNELS = ("u225", "v225", "z225", "u500", "v500", "z500", "u700", "v700", "z700", "SST")
FIELD_MAGIC = b"TCLF"
FIELD_VERSION = 1


@dataclass(frozen=True)
class TrackPoint:
    time: datetime
    position: GeoPoint
    dist_to_land: float

    @property
    def over_land(self) -> bool:
        return self.dist_to_land <= 0.0


@dataclass
class Track:
    sid: str
    name: str
    basin: str
    points: list[TrackPoint] = field(default_factory=list)


@dataclass
class CycloneUnit:
    """One ocean run of a storm that ends on land; ``ocean_points`` are all over water."""

    id: str
    basin: str
    ocean_points: list[TrackPoint]
    landfall: TrackPoint

    @property
    def landfall_time(self) -> datetime:
        return self.landfall.time

    @property
    def n_ocean(self) -> int:
        return len(self.ocean_points)

    @property
    def duration_hours(self) -> float:
        return (self.landfall.time - self.ocean_points[0].time).total_seconds() / 3600.0

    def unwrapped_lons(self) -> np.ndarray:
        """Longitudes of the ocean points followed by landfall, continuous across +/-180."""
        lons = np.array([p.position.lon for p in self.ocean_points] + [self.landfall.position.lon])
        return np.degrees(np.unwrap(np.radians(lons)))


def parse_time(text: str) -> datetime:
    text = text.strip()
    try:
        t = datetime.fromisoformat(text.replace("Z", "+00:00").replace("T", " "))
    except ValueError:
        raise DataFormatError(f"bad timestamp {text!r}") from None
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%d %H:%M:%S")


def parse_tracks(source) -> list[Track]:
    """Read a track table from a path or an open text file."""
    if hasattr(source, "read"):
        return _parse_tracks(source)
    with open(source, newline="") as fh:
        return _parse_tracks(fh)


def _parse_tracks(fh) -> list[Track]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise DataFormatError("track file is empty (missing header)")
    header = [h.strip() for h in header]
    missing = [c for c in TRACK_COLUMNS if c not in header]
    if missing:
        raise DataFormatError(f"track header missing columns {missing}")
    col = {c: header.index(c) for c in TRACK_COLUMNS}

    tracks: list[Track] = []
    seen: set[str] = set()
    current: Track | None = None
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        sid = row[col["sid"]].strip()
        basin = row[col["basin"]].strip().upper()
        if basin not in BASINS:
            raise DataFormatError(f"line {line}: unknown basin code {basin!r}")
        try:
            t = parse_time(row[col["iso_time"]])
            lat = float(row[col["lat"]])
            lon = float(row[col["lon"]])
            dist = float(row[col["dist2land_km"]])
            pos = GeoPoint(lat, lon)
        except (ValueError, DataFormatError) as exc:
            raise DataFormatError(f"line {line}: malformed row ({exc})") from None
        if not np.isfinite(dist) or dist < 0:
            raise DataFormatError(f"line {line}: dist2land_km must be finite and >= 0, got {dist}")

        if current is None or current.sid != sid:
            if sid in seen:
                raise DataFormatError(f"line {line}: rows of sid {sid} are not contiguous")
            seen.add(sid)
            current = Track(sid=sid, name=row[col["name"]].strip(), basin=basin)
            tracks.append(current)
        elif current.points:
            prev = current.points[-1].time
            if t <= prev:
                raise DataFormatError(
                    f"line {line}: non-monotone timestamps for sid {sid}: {format_time(t)} after {format_time(prev)}"
                )
            if t - prev != STEP:
                gap = (t - prev).total_seconds() / 3600.0
                raise DataFormatError(
                    f"line {line}: sid {sid} breaks the 3-hour lattice at {format_time(t)} (gap {gap:g}h)"
                )
        current.points.append(TrackPoint(time=t, position=pos, dist_to_land=dist))
    return tracks


def write_tracks(path, tracks: Iterable[Track]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for tr in tracks:
            for p in tr.points:
                w.writerow([tr.sid, tr.name, tr.basin, format_time(p.time),
                            repr(p.position.lat), repr(p.position.lon), repr(p.dist_to_land)])


def extract_cyclone_units(track: Track, min_hours: float = MIN_UNIT_HOURS) -> list[CycloneUnit]:
    """Split a track into ocean runs that end on land; short or landless runs are dropped."""
    units = []
    run: list[TrackPoint] = []
    for p in track.points:
        if not p.over_land:
            run.append(p)
            continue
        if run:
            hours = (p.time - run[0].time).total_seconds() / 3600.0
            if hours >= min_hours:
                units.append(CycloneUnit(
                    id=f"{track.sid}_{len(units) + 1:02d}",
                    basin=track.basin,
                    ocean_points=run,
                    landfall=p,
                ))
            else:
                log.debug("dropping %gh ocean run of %s ending %s", hours, track.sid, format_time(p.time))
        run = []
    return units


# ---------------------------------------------------------------- field archive

_HEADER = struct.Struct("<4sII")
_DIMS = struct.Struct("<IIII")
_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


def fill_missing_sst(snapshots: np.ndarray) -> np.ndarray:
    """Replace non-finite SST cells (land inside the window) by that snapshot's mean SST."""
    out = np.array(snapshots, dtype=np.float32, copy=True)
    sst = out[:, -1]
    for t in range(out.shape[0]):
        bad = ~np.isfinite(sst[t])
        if bad.any():
            good = sst[t][~bad]
            if good.size == 0:
                raise DataFormatError(f"snapshot {t}: SST window has no ocean cells")
            sst[t][bad] = good.mean(dtype=np.float64)
    if not np.isfinite(out).all():
        raise DataFormatError("non-finite values outside the SST channel")
    return out


def _unit_path(archive, unit_id: str) -> Path:
    if not _SAFE_ID.match(unit_id):
        raise DataFormatError(f"unit id {unit_id!r} contains characters not allowed in an archive")
    return Path(archive) / f"{unit_id}.tclf"


def encode_fields(unit_id: str, snapshots: np.ndarray) -> bytes:
    arr = np.asarray(snapshots)
    if arr.ndim != 4 or arr.shape[1:] != (len(FIELD_CHANNELS), GRID_SIZE, GRID_SIZE):
        raise DataFormatError(f"snapshots must be [T,10,33,33], got {arr.shape}")
    uid = unit_id.encode("utf-8")
    return (
        _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, len(uid)) + uid
        + _DIMS.pack(*arr.shape)
        + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    )


def decode_fields(buf: bytes) -> tuple[str, np.ndarray]:
    if len(buf) < _HEADER.size:
        raise DataFormatError("field file truncated before header")
    magic, version, id_len = _HEADER.unpack_from(buf, 0)
    if magic != FIELD_MAGIC:
        raise DataFormatError(f"bad field-file magic {magic!r}")
    if version != FIELD_VERSION:
        raise DataFormatError(f"unsupported field-file version {version}")
    off = _HEADER.size
    uid = buf[off:off + id_len].decode("utf-8")
    off += id_len
    if len(buf) < off + _DIMS.size:
        raise DataFormatError("field file truncated in dimension header")
    n_time, n_ch, height, width = _DIMS.unpack_from(buf, off)
    off += _DIMS.size
    if (n_ch, height, width) != (len(FIELD_CHANNELS), GRID_SIZE, GRID_SIZE):
        raise DataFormatError(f"field dims {n_ch}x{height}x{width}, expected 10x33x33")
    count = n_time * n_ch * height * width
    if len(buf) != off + 4 * count:
        raise DataFormatError(f"field payload is {len(buf) - off} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(n_time, n_ch, height, width)
    return uid, data.astype(np.float32)


def write_fields(archive, unit_id: str, snapshots: np.ndarray, unit: CycloneUnit | None = None) -> Path:
    if unit is not None and len(snapshots) != unit.n_ocean:
        raise DataFormatError(
            f"unit {unit_id}: {len(snapshots)} snapshots for {unit.n_ocean} ocean points"
        )
    path = _unit_path(archive, unit_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_fields(unit_id, snapshots))
    return path


def read_fields(archive, unit_id: str, unit: CycloneUnit | None = None) -> np.ndarray:
    path = _unit_path(archive, unit_id)
    if not path.exists():
        raise NotFoundError(f"unit {unit_id} not in field archive {archive}")
    uid, data = decode_fields(path.read_bytes())
    if uid != unit_id:
        raise DataFormatError(f"{path.name} holds unit {uid!r}, expected {unit_id!r}")
    if unit is not None and len(data) != unit.n_ocean:
        raise DataFormatError(f"unit {unit_id}: archive has {len(data)} snapshots for {unit.n_ocean} ocean points")
    return data


def list_archive(archive) -> list[str]:
    return sorted(p.stem for p in Path(archive).glob("*.tclf"))


def load_units(track_path, min_hours: float = MIN_UNIT_HOURS) -> list[CycloneUnit]:
    units = []
    for tr in parse_tracks(track_path):
        units.extend(extract_cyclone_units(tr, min_hours))
    return units


def check_archive(archive, units: Sequence[CycloneUnit]) -> None:
    """Every unit must have a readable, aligned field record."""
    for u in units:
        read_fields(archive, u.id, u)
