"""Acceptance criteria 1-11; each test prints one PASS/FAIL line.

Criteria 7 and 8 run the full synthetic pipeline through the CLI twice
(about 10-15 minutes each on one core).
"""

import math
import struct
import time
from datetime import datetime, timezone

import numpy as np
import pytest

from tclandfall import autodiff as ad
from tclandfall.autodiff import Tensor
from tclandfall.checkpoint import decode_checkpoint, encode_checkpoint
from tclandfall.cli import main
from tclandfall.errors import DataFormatError
from tclandfall.geo import GeoPoint, haversine_km
from tclandfall.ingest import STEP, CycloneUnit, TrackPoint, decode_fields, encode_fields, extract_cyclone_units
from tclandfall.metrics import mae, mse, read_report_csv, rmse
from tclandfall.nn import Conv2d, Dense, LandfallModel, LSTMLayer, ModelConfig, conv2d_forward, lstm_step, maxpool2
from tclandfall.scaling import apply_scaler, fit_scaler
from tclandfall.synth import synthesize_basin
from tclandfall.training import TrainConfig, dataset_mse, target_array, trace_cyclone, train
from tclandfall.windowing import (
    Sample,
    load_dataset,
    make_split,
    prepare_dataset,
    save_dataset,
    window_unit,
)

from conftest import central_diff, rel_err

PIPELINE_SEED = 7
PIPELINE_CYCLONES = 40
PIPELINE_EPOCHS = 10
BUDGET_SECONDS = 30 * 60


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {title}" + (f" [{detail}]" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def _gradcheck(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    ad.backward(loss_fn())
    return max(rel_err(t.grad, central_diff(lambda: float(loss_fn().data), t.data)) for t in tensors)


def _proj(y, seed):
    return ad.reduce_sum(ad.mul(y, Tensor(np.random.default_rng(seed).normal(size=y.shape))))


def test_criterion_01_gradients(verdict):
    rng = np.random.default_rng(1)
    started = time.perf_counter()
    leaf = lambda *s: Tensor(rng.normal(size=s), requires_grad=True)
    prim = []
    a, b = leaf(3, 4), leaf(3, 4)
    for f in (ad.add, ad.sub, ad.mul):
        prim.append(_gradcheck(lambda: _proj(f(a, b), 0), [a, b]))
    m1, m2 = leaf(3, 4), leaf(4, 2)
    prim.append(_gradcheck(lambda: _proj(ad.matmul(m1, m2), 1), [m1, m2]))
    x = leaf(3, 4)
    for f in (ad.sigmoid, ad.tanh, ad.relu, ad.transpose, lambda t: ad.reduce_sum(t, axis=0),
              lambda t: ad.concat([t, t], axis=1), lambda t: t[1:, :3]):
        prim.append(_gradcheck(lambda: _proj(f(x), 2), [x]))

    layers = []
    conv = Conv2d(2, 3, rng=rng)
    cx = leaf(2, 6, 6)
    layers.append(_gradcheck(lambda: _proj(conv2d_forward(conv, cx), 3), [conv.weight, conv.bias, cx]))
    px = leaf(2, 6, 6)
    layers.append(_gradcheck(lambda: _proj(maxpool2(px), 4), [px]))
    dense = Dense(5, 3, activation="relu", rng=rng)
    dx = leaf(4, 5)
    layers.append(_gradcheck(lambda: _proj(dense(dx), 5), [dense.weight, dense.bias, dx]))
    lstm = LSTMLayer(3, 4, rng=rng)
    lx, lh, lc = leaf(2, 3), leaf(2, 4), leaf(2, 4)
    layers.append(_gradcheck(lambda: _proj(ad.concat(list(lstm_step(lstm, lx, lh, lc)), axis=1), 6),
                             [lstm.weight, lstm.bias, lx, lh, lc]))

    model = LandfallModel(ModelConfig(n_steps=2, in_channels=12, grid_size=8, conv_channels=(2,),
                                      encoder_width=4, lstm_sizes=(4,), head_hidden=4), seed=0)
    mx, my = Tensor(rng.normal(size=(2, 2, 12, 8, 8))), Tensor(rng.normal(size=(2, 2)))

    def model_loss():
        d = ad.sub(model.forward(mx), my)
        return ad.reduce_mean(ad.mul(d, d))

    full = _gradcheck(model_loss, model.parameters())
    elapsed = time.perf_counter() - started
    ok = max(prim) < 1e-6 and max(layers) < 1e-5 and full < 1e-5 and elapsed < 60
    verdict(1, "gradient checks (primitives < 1e-6, layers and tiny T=2 model < 1e-5, < 60 s)", ok,
            f"primitives {max(prim):.1e}, layers {max(layers):.1e}, model {full:.1e}, {elapsed:.1f}s")


def _unit(t_l):
    t0 = datetime(2019, 12, 5, tzinfo=timezone.utc)
    pts = [TrackPoint(t0 + k * STEP, GeoPoint(-10 - 0.1 * k, 55 - 0.2 * k), 300.0 - k) for k in range(t_l)]
    return CycloneUnit("BELNA_01", "SI", pts, TrackPoint(t0 + t_l * STEP, GeoPoint(-15.0, 47.0), 0.0))


def test_criterion_02_windowing(verdict):
    rng = np.random.default_rng(2)
    counts = {}
    hours_ok = True
    for t_l, t in ((37, 8), (7, 4), (9, 6), (11, 8), (6, 4), (8, 6), (10, 8)):
        samples = window_unit(_unit(t_l), rng.normal(size=(t_l, 10, 33, 33)).astype(np.float32), t)
        counts[(t_l, t)] = len(samples)
        hours_ok &= all(s.target_hours >= 12 for s in samples)
    ok = (counts[(37, 8)] == 27 and all(counts[(t + 3, t)] == 1 for t in (4, 6, 8))
          and all(counts[(t + 2, t)] == 0 for t in (4, 6, 8)) and hours_ok)
    verdict(2, "windowing: T_L=37,T=8 -> 27; T_L=T+3 -> 1; T_L=T+2 -> 0; target_hours >= 12", ok,
            f"counts {counts}")


def test_criterion_03_parameters(verdict):
    counts = {t: LandfallModel(ModelConfig(n_steps=t, head_width=2)).n_params() for t in (4, 6, 8)}
    ok = 140_000 <= counts[8] <= 175_000 and len(set(counts.values())) == 1
    verdict(3, "parameter count of the T=8 location model in [140000, 175000], independent of T", ok,
            f"{counts}")


def test_criterion_04_metrics(verdict):
    checks = [
        abs(mse([1, 2, 3], [2, 4, 3]) - 5 / 3) < 1e-12,
        abs(mae([1, 2, 3], [2, 4, 3]) - 1) < 1e-12,
        abs(rmse([1, 2, 3], [2, 4, 3]) - math.sqrt(5 / 3)) < 1e-12,
        mse([0, 0], [1, -1]) == rmse([0, 0], [1, -1]) == mae([0, 0], [1, -1]) == 1.0,
    ]
    rng = np.random.default_rng(4)
    dominance = all(
        rmse(y, p) >= mae(y, p) for y, p in ((rng.normal(size=n), rng.normal(size=n)) for n in rng.integers(1, 40, 1000))
    )
    zero = haversine_km(GeoPoint(12.5, 80.25), GeoPoint(12.5, 80.25))
    one = haversine_km(GeoPoint(0, 0), GeoPoint(1, 0))
    ok = all(checks) and dominance and zero == 0.0 and abs(one - 111.19) <= 0.01
    verdict(4, "metric oracles to 1e-12, RMSE >= MAE on 1000 vectors, haversine 0 and 111.19 km", ok,
            f"oracles {checks}, dominance {dominance}, 1 deg = {one:.4f} km")


def _samples(rng, n, t=4, size=8):
    out = []
    for i in range(n):
        w = rng.normal(size=(t, 12, size, size)) * np.arange(1, 13)[None, :, None, None]
        w += np.linspace(-3e4, 3e4, 12)[None, :, None, None]
        w[:, 7] = 55_000.0
        out.append(Sample("U", i + 1, w, datetime(2020, 1, 1, tzinfo=timezone.utc), 9.0,
                          (15 + rng.normal(), 85 + rng.normal()), float(rng.uniform(12, 90)),
                          np.zeros((t, 2)), np.ones(t)))
    return out


def test_criterion_05_scaler(verdict):
    samples = _samples(np.random.default_rng(5), 8)
    stats = fit_scaler(samples)
    scaled = np.stack([apply_scaler(stats, s.window) for s in samples]).transpose(2, 0, 1, 3, 4).reshape(12, -1)
    live = [c for c in range(12) if c != 7]
    mean_err = float(np.abs(scaled[live].mean(axis=1)).max())
    var_err = float(np.abs(scaled[live].var(axis=1) - 1).max())
    const_zero = bool(np.all(scaled[7] == 0))
    loc = target_array(samples, stats, "location")
    loc_scaled = np.allclose(loc.mean(axis=0), 0, atol=1e-12) and np.allclose(loc.std(axis=0), 1, atol=1e-12)
    hours_raw = target_array(samples, stats, "time")[:, 0].tolist() == [s.target_hours for s in samples]
    ok = mean_err < 1e-9 and var_err < 1e-9 and const_zero and loc_scaled and hours_raw
    verdict(5, "scaler: |mean| < 1e-9, |var-1| < 1e-9, constant channel -> 0, location scaled, hours raw", ok,
            f"mean {mean_err:.1e}, var {var_err:.1e}, const {const_zero}, loc {loc_scaled}, hours {hours_raw}")


def test_criterion_06_overfit(verdict):
    rng = np.random.default_rng(6)
    samples = [Sample("U", i + 1, rng.normal(size=(2, 12, 8, 8)), datetime(2020, 1, 1, tzinfo=timezone.utc), 9.0,
                      (10 + rng.normal(), 80 + rng.normal()), 12.0 + 3 * i, np.zeros((2, 2)), np.ones(2))
               for i in range(4)]
    stats = fit_scaler(samples)
    model = LandfallModel(ModelConfig(n_steps=2, grid_size=8, conv_channels=(4,), encoder_width=16,
                                      lstm_sizes=(16,), head_hidden=16), seed=0)
    started = time.perf_counter()
    initial = dataset_mse(model, samples, stats)
    train(model, samples, [], stats, TrainConfig(epochs=500, batch_size=4))
    ratio = dataset_mse(model, samples, stats) / initial
    elapsed = time.perf_counter() - started
    verdict(6, "tiny model memorizes 4 samples to < 1e-3 relative MSE in 500 epochs, < 5 min",
            ratio < 1e-3 and elapsed < 300, f"relative MSE {ratio:.2e}, {elapsed:.1f}s")


def _pipeline(root):
    started = time.perf_counter()
    codes = [
        main(["synth", "--seed", str(PIPELINE_SEED), "--n-cyclones", str(PIPELINE_CYCLONES), "--basin", "NI",
              "--out", str(root / "synth")]),
        main(["prepare", "--tracks", str(root / "synth/tracks.csv"), "--fields", str(root / "synth/fields"),
              "--basin", "NI", "--window-hours", "9", "--split", "kfold", "--seed", str(PIPELINE_SEED),
              "--out", str(root / "prepare")]),
        main(["evaluate", "--dataset", str(root / "prepare/dataset.tcds"), "--window-hours", "9",
              "--epochs", str(PIPELINE_EPOCHS), "--seed", str(PIPELINE_SEED), "--out", str(root / "evaluate")]),
    ]
    return codes, time.perf_counter() - started


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    return [(root, *_pipeline(root)) for root in (tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b"))]


def test_criterion_07_synthetic_end_to_end(verdict, pipeline_runs):
    root, codes, elapsed = pipeline_runs[0]
    rows = {r["model"]: r for r in read_report_csv(root / "evaluate/metrics.csv")} if codes == [0, 0, 0] else {}
    if rows:
        model, base = rows["cnn_lstm"], rows["persistence"]
        dist = (float(model["mae_distance_km"]), float(base["mae_distance_km"]))
        hours = (float(model["mae_time"]), float(base["mae_time"]))
        ok = elapsed < BUDGET_SECONDS and dist[0] < dist[1] and hours[0] < hours[1] and model["n_folds"] == "5"
        detail = (f"{elapsed:.0f}s, distance {dist[0]:.1f} vs {dist[1]:.1f} km, "
                  f"time MAE {hours[0]:.2f} vs {hours[1]:.2f} h")
    else:
        ok, detail = False, f"exit codes {codes}"
    verdict(7, f"synthetic 40-cyclone 5-fold pipeline at T=4 ({PIPELINE_EPOCHS} epochs) beats persistence in < 30 min",
            ok, detail)


def test_criterion_08_determinism(verdict, pipeline_runs):
    (a, codes_a, _), (b, codes_b, _) = pipeline_runs
    names = ["synth/tracks.csv", "prepare/dataset.tcds", "prepare/split.json", "evaluate/metrics.csv",
             "evaluate/folds.csv"] + [f"evaluate/history_fold{f}_{t}.csv" for f in range(5) for t in ("location", "time")]
    names += [f"synth/fields/{p.name}" for p in sorted((a / "synth/fields").iterdir())]
    same = codes_a == codes_b == [0, 0, 0] and all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    verdict(8, "repeating the pipeline with the same seed reproduces every output byte-for-byte", same,
            f"{len(names)} files compared")


def test_criterion_09_split_hygiene(verdict):
    tracks, fields = synthesize_basin(9, 23, "EP")
    units = [u for t in tracks for u in extract_cyclone_units(t)]
    ds = prepare_dataset(units, fields, 4, "kfold", seed=0)
    n = len(units)
    leaks, ratio_bad = 0, 0
    for seed in range(100):
        for mode in ("holdout", "kfold"):
            ds.split = make_split([u.id for u in units], mode, seed)
            for fold in range(len(ds.split.folds)):
                owner = {}
                for bucket in ("train", "val", "test"):
                    for s in ds.bucket(bucket, fold):
                        if owner.setdefault(s.unit_id, bucket) != bucket:
                            leaks += 1
            if mode == "holdout":
                f = ds.split.folds[0]
                sizes = (len(f["train"]), len(f["val"]), len(f["test"]))
                ratio_bad += not (sum(sizes) == n and abs(sizes[0] - 0.6 * n) <= 1
                                  and abs(sizes[1] - 0.2 * n) <= 1 and abs(sizes[2] - 0.2 * n) <= 1)
    verdict(9, "100 seeds: no unit in two buckets; holdout 60:20:20 by unit count (+/-1)",
            leaks == 0 and ratio_bad == 0, f"{n} units, {leaks} leaks, {ratio_bad} ratio violations")


def _raises_format(fn, buf):
    try:
        fn(buf)
    except DataFormatError:
        return True
    return False


def test_criterion_10_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(10)
    snaps = rng.normal(size=(6, 10, 33, 33)).astype(np.float32)
    fbuf = encode_fields("U_01", snaps)
    field_ok = decode_fields(fbuf)[1].tobytes() == snaps.tobytes()

    tracks, fields = synthesize_basin(10, 6, "SP")
    units = [u for t in tracks for u in extract_cyclone_units(t)]
    ds = prepare_dataset(units, fields, 6, "kfold", seed=1)
    save_dataset(tmp_path / "a.tcds", ds)
    back = load_dataset(tmp_path / "a.tcds")
    save_dataset(tmp_path / "b.tcds", back)
    dbuf = (tmp_path / "a.tcds").read_bytes()
    dataset_ok = dbuf == (tmp_path / "b.tcds").read_bytes() and all(
        x.window.tobytes() == y.window.tobytes() for x, y in zip(ds.samples, back.samples))

    model = LandfallModel(ModelConfig(n_steps=6), seed=2)
    stats = fit_scaler(ds.samples)
    cbuf = encode_checkpoint(model, stats, {"note": "x"})
    reloaded, _, _ = decode_checkpoint(cbuf)
    ckpt_ok = encode_checkpoint(reloaded, stats, {"note": "x"}) == cbuf

    def load_ds(buf):
        (tmp_path / "c.tcds").write_bytes(buf)
        load_dataset(tmp_path / "c.tcds")

    bad_magic = lambda buf: b"ZZZZ" + buf[4:]
    bad_version = lambda buf: buf[:4] + struct.pack("<I", 99) + buf[8:]
    errors_ok = all(
        _raises_format(fn, mutate(buf))
        for fn, buf in ((decode_fields, fbuf), (load_ds, dbuf), (decode_checkpoint, cbuf))
        for mutate in (bad_magic, bad_version)
    )
    verdict(10, "field archive, dataset and checkpoint round-trip bit-exactly; bad magic/version rejected",
            field_ok and dataset_ok and ckpt_ok and errors_ok,
            f"fields {field_ok}, dataset {dataset_ok}, checkpoint {ckpt_ok}, errors {errors_ok}")


def test_criterion_11_trace(verdict):
    tracks, fields = synthesize_basin(11, 10, "NI")
    units = [u for t in tracks for u in extract_cyclone_units(t)]
    ds = prepare_dataset(units, fields, 8, "holdout", seed=3)
    held_out = max((ds.unit(uid) for uid in ds.split.folds[0]["test"]), key=lambda u: u.n_ocean)
    train_set = ds.bucket("train")
    stats = fit_scaler(train_set)
    narrow = dict(n_steps=8, conv_channels=(4, 4, 4), encoder_width=8, lstm_sizes=(8,), head_hidden=8)
    loc = train(LandfallModel(ModelConfig(head_width=2, **narrow), seed=1), train_set, [], stats,
                TrainConfig(epochs=1))[0]
    tim = train(LandfallModel(ModelConfig(head_width=1, **narrow), seed=2), train_set, [], stats,
                TrainConfig(epochs=1))[0]
    rows = trace_cyclone(loc, tim, stats, held_out, fields[held_out.id], 8)
    first = rows[0]["hours_since_formation"] if rows else None
    last = rows[-1]["actual_hours"] if rows else None
    ok = bool(rows) and first == 21.0 and last >= 12.0 and held_out.id not in {s.unit_id for s in train_set}
    verdict(11, "T=8 trace of a held-out cyclone starts 21 h after formation and ends >= 12 h before landfall",
            ok, f"{held_out.id}: {len(rows)} rows, first at {first} h, last {last} h before landfall")
