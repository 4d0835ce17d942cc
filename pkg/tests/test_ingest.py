import io
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from tclandfall.errors import DataFormatError, NotFoundError
from tclandfall.geo import GeoPoint
from tclandfall.ingest import (
    STEP,
    Track,
    TrackPoint,
    extract_cyclone_units,
    fill_missing_sst,
    list_archive,
    parse_tracks,
    read_fields,
    write_fields,
    write_tracks,
)

HEADER = "sid,name,basin,iso_time,lat,lon,dist2land_km\n"
T0 = datetime(2019, 12, 6, 0, tzinfo=timezone.utc)


def csv_rows(sid, n, hours=3, start=T0, basin="NI", dist=100.0):
    return "".join(
        f"{sid},X,{basin},{(start + timedelta(hours=hours * k)).strftime('%Y-%m-%d %H:%M:%S')},"
        f"{10 + 0.1 * k},{80 + 0.1 * k},{dist}\n"
        for k in range(n)
    )


def make_track(dists, sid="S1"):
    return Track(sid=sid, name="X", basin="NI", points=[
        TrackPoint(T0 + k * STEP, GeoPoint(10 + 0.1 * k, 80 + 0.1 * k), float(d)) for k, d in enumerate(dists)
    ])


def test_empty_file_with_header():
    assert parse_tracks(io.StringIO(HEADER)) == []


def test_ten_rows_one_track():
    tracks = parse_tracks(io.StringIO(HEADER + csv_rows("A", 10)))
    assert len(tracks) == 1 and len(tracks[0].points) == 10
    assert tracks[0].points[-1].time - tracks[0].points[0].time == timedelta(hours=27)


def test_six_hour_gap():
    text = HEADER + csv_rows("GAPPY", 3) + csv_rows("GAPPY", 2, start=T0 + timedelta(hours=12))
    with pytest.raises(DataFormatError, match=r"GAPPY.*gap 6h"):
        parse_tracks(io.StringIO(text))


def test_non_monotone():
    text = HEADER + csv_rows("A", 3) + csv_rows("A", 1)
    with pytest.raises(DataFormatError, match="non-monotone"):
        parse_tracks(io.StringIO(text))


def test_unknown_basin():
    with pytest.raises(DataFormatError, match="basin"):
        parse_tracks(io.StringIO(HEADER + csv_rows("A", 2, basin="XX")))


def test_malformed_row_reports_line():
    text = HEADER + csv_rows("A", 2) + "A,X,NI,2019-12-06 06:00:00,abc,80,10\n"
    with pytest.raises(DataFormatError, match="line 4"):
        parse_tracks(io.StringIO(text))


def test_write_parse_round_trip(tmp_path):
    tracks = parse_tracks(io.StringIO(HEADER + csv_rows("A", 4) + csv_rows("B", 3)))
    write_tracks(tmp_path / "t.csv", tracks)
    assert parse_tracks(tmp_path / "t.csv") == tracks


def test_never_lands():
    assert extract_cyclone_units(make_track([100.0] * 20)) == []


def test_two_landfalls():
    # ocean 30h, land, ocean 24h, land
    dists = [50.0] * 10 + [0.0] + [50.0] * 8 + [0.0]
    units = extract_cyclone_units(make_track(dists))
    assert len(units) == 2
    assert [u.duration_hours for u in units] == [30.0, 24.0]
    assert [u.id for u in units] == ["S1_01", "S1_02"]
    for u in units:
        assert all(p.dist_to_land > 0 for p in u.ocean_points)
        assert u.landfall.dist_to_land == 0
        assert all(p.time < u.landfall_time for p in u.ocean_points)


def test_short_run_dropped():
    assert extract_cyclone_units(make_track([50.0] * 4 + [0.0])) == []


def test_exact_minimum_kept():
    # 7 ocean fixes = 21h from the first fix to landfall
    units = extract_cyclone_units(make_track([50.0] * 7 + [0.0]))
    assert len(units) == 1 and units[0].duration_hours == 21.0


def test_ocean_points_bounded_by_track(rng):
    for _ in range(20):
        dists = np.where(rng.random(60) < 0.15, 0.0, 40.0)
        track = make_track(dists)
        units = extract_cyclone_units(track)
        assert sum(u.n_ocean for u in units) <= len(track.points)


def test_archive_round_trip(tmp_path, rng):
    snaps = rng.normal(size=(5, 10, 33, 33)).astype(np.float32)
    write_fields(tmp_path, "U_01", snaps)
    back = read_fields(tmp_path, "U_01")
    assert back.dtype == np.float32 and back.tobytes() == snaps.tobytes()
    assert list_archive(tmp_path) == ["U_01"]


def test_archive_missing_unit(tmp_path):
    with pytest.raises(NotFoundError):
        read_fields(tmp_path, "nope")


def test_archive_bad_dims(tmp_path):
    path = write_fields(tmp_path, "U_01", np.zeros((2, 10, 33, 33), np.float32))
    buf = bytearray(path.read_bytes())
    # height field sits after magic, version, id_len, id, n_time, n_channels
    off = 12 + len("U_01") + 8
    buf[off:off + 4] = (32).to_bytes(4, "little")
    path.write_bytes(bytes(buf))
    with pytest.raises(DataFormatError, match="dims"):
        read_fields(tmp_path, "U_01")


def test_archive_count_mismatch(tmp_path):
    unit = extract_cyclone_units(make_track([50.0] * 8 + [0.0]))[0]
    with pytest.raises(DataFormatError, match="8 ocean points"):
        write_fields(tmp_path, unit.id, np.zeros((3, 10, 33, 33), np.float32), unit)


def test_fill_missing_sst(rng):
    snaps = rng.normal(300, 1, size=(2, 10, 33, 33)).astype(np.float32)
    snaps[0, 9, :5, :] = np.nan
    filled = fill_missing_sst(snaps)
    assert np.isfinite(filled).all()
    expected = np.float32(snaps[0, 9, 5:, :].mean(dtype=np.float64))
    assert filled[0, 9, 0, 0] == expected
    np.testing.assert_array_equal(filled[1], snaps[1])
