"""Training loop, evaluation, k-fold harness, persistence baseline and per-cyclone traces."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from tclandfall import autodiff as ad
from tclandfall.errors import NumericalError, UsageError
from tclandfall.geo import haversine_km_array
from tclandfall.ingest import CycloneUnit, format_time
from tclandfall.metrics import MetricsReport, aggregate, mae, rmse
from tclandfall.nn import LandfallModel, ModelConfig
from tclandfall.optim import Adam
from tclandfall.scaling import ScalerStats, fit_scaler
from tclandfall.windowing import PreparedDataset, Sample, _samples_from_frames, unit_frames

log = logging.getLogger(__name__)

MIN_BASELINE_SPEED_KMH = 1.0


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 32
    seed: int = 0
    scale_latlon: bool = True
    # time head: start the output bias at the mean training hours
    init_time_bias: bool = True


@dataclass
class History:
    initial_train_mse: float = float("nan")
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic sub-seed for a fold/component below the run seed."""
    return int(np.random.SeedSequence([int(seed), *[int(p) for p in path]]).generate_state(1)[0])


def batch_arrays(samples: Sequence[Sample], stats: ScalerStats, target: str) -> tuple[np.ndarray, np.ndarray]:
    """Scaled inputs ``[N,T,12,H,W]`` and the training targets for ``target``."""
    x = stats.transform(np.stack([s.window for s in samples]))
    return x, target_array(samples, stats, target)


def target_array(samples: Sequence[Sample], stats: ScalerStats, target: str) -> np.ndarray:
    if target == "location":
        return stats.scale_targets([s.target_location for s in samples])
    if target == "time":
        return np.array([[s.target_hours] for s in samples], dtype=np.float64)
    raise UsageError(f"unknown target {target!r} (expected location or time)")


def _mse_loss(pred: ad.Tensor, y: np.ndarray) -> ad.Tensor:
    d = ad.sub(pred, ad.Tensor(y))
    return ad.reduce_mean(ad.mul(d, d))


def dataset_mse(model: LandfallModel, samples: Sequence[Sample], stats: ScalerStats,
                batch_size: int = 64) -> float:
    target = model.config.target
    total, n = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = batch_arrays(samples[i:i + batch_size], stats, target)
            d = model.forward(ad.Tensor(x)).data - y
            total += float((d * d).sum())
            n += d.size
    return total / n


def train(model: LandfallModel, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          stats: ScalerStats, config: TrainConfig | None = None) -> tuple[LandfallModel, History]:
    """Adam on MSE for a fixed number of epochs; the final weights are kept (no early stopping)."""
    config = config or TrainConfig()
    if not train_samples:
        raise UsageError("training split is empty")
    target = model.config.target
    if model.config.n_steps != train_samples[0].window.shape[0]:
        raise UsageError(
            f"model built for T={model.config.n_steps} but samples have T={train_samples[0].window.shape[0]}"
        )
    if target == "time" and config.init_time_bias:
        model.head_out.bias.data[:] = np.mean([s.target_hours for s in train_samples])

    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    history = History(initial_train_mse=dataset_mse(model, train_samples, stats))
    started = time.perf_counter()
    n = len(train_samples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, config.batch_size):
            batch = [train_samples[i] for i in order[b:b + config.batch_size]]
            x, y = batch_arrays(batch, stats, target)
            loss = _mse_loss(model.forward(ad.Tensor(x)), y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch + 1}, batch {b // config.batch_size}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += value * len(batch)
        history.train_mse.append(total / n)
        if val_samples:
            history.val_mse.append(dataset_mse(model, val_samples, stats))
        log.debug("epoch %d/%d %s train_mse=%.6g val_mse=%s", epoch + 1, config.epochs, target,
                  history.train_mse[-1], history.val_mse[-1] if history.val_mse else "-")
    history.seconds = time.perf_counter() - started
    return model, history


# ---------------------------------------------------------------- evaluation

def predict_location(model: LandfallModel, samples: Sequence[Sample], stats: ScalerStats) -> np.ndarray:
    """Predicted landfall (lat, lon) in degrees, ``[N, 2]``."""
    if model.config.target != "location":
        raise UsageError("predict_location needs a location model")
    x = stats.transform(np.stack([s.window for s in samples]))
    return stats.unscale_targets(model.predict(x))


def predict_hours(model: LandfallModel, samples: Sequence[Sample], stats: ScalerStats) -> np.ndarray:
    if model.config.target != "time":
        raise UsageError("predict_hours needs a time model")
    x = stats.transform(np.stack([s.window for s in samples]))
    return model.predict(x)[:, 0]


def location_report(pred: np.ndarray, samples: Sequence[Sample]) -> MetricsReport:
    y = np.array([s.target_location for s in samples], dtype=np.float64)
    dist = haversine_km_array(y[:, 0], y[:, 1], pred[:, 0], pred[:, 1])
    return MetricsReport(
        metrics={
            "rmse_lat": rmse(y[:, 0], pred[:, 0]),
            "rmse_lon": rmse(y[:, 1], pred[:, 1]),
            "mae_lat": mae(y[:, 0], pred[:, 0]),
            "mae_lon": mae(y[:, 1], pred[:, 1]),
            "mae_distance_km": float(np.mean(dist)),
        },
        n_samples=len(samples),
    )


def time_report(pred: np.ndarray, samples: Sequence[Sample]) -> MetricsReport:
    y = np.array([s.target_hours for s in samples], dtype=np.float64)
    return MetricsReport(metrics={"rmse_time": rmse(y, pred), "mae_time": mae(y, pred)}, n_samples=len(samples))


def evaluate(model: LandfallModel, samples: Sequence[Sample], stats: ScalerStats) -> MetricsReport:
    """Errors in physical units: degrees and km for a location model, hours for a time model."""
    if not samples:
        raise UsageError("test split is empty")
    if model.config.target == "location":
        return location_report(predict_location(model, samples, stats), samples)
    return time_report(predict_hours(model, samples, stats), samples)


def persistence_predictions(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Landfall at the last observed fix; time = distance to land / recent speed."""
    loc = np.array([s.positions[-1] for s in samples], dtype=np.float64)
    hours = []
    for s in samples:
        (lat0, lon0), (lat1, lon1) = s.positions[-2], s.positions[-1]
        speed = float(haversine_km_array(lat0, lon0, lat1, lon1)) / 3.0
        hours.append(s.dist_to_land[-1] / max(speed, MIN_BASELINE_SPEED_KMH))
    return loc, np.array(hours)


def persistence_report(samples: Sequence[Sample]) -> MetricsReport:
    loc, hours = persistence_predictions(samples)
    return location_report(loc, samples).merged(time_report(hours, samples))


@dataclass
class FoldResult:
    fold: int
    model: MetricsReport
    baseline: MetricsReport
    location_history: History
    time_history: History
    location_model: LandfallModel | None = None
    time_model: LandfallModel | None = None
    stats: ScalerStats | None = None


@dataclass
class KFoldResult:
    folds: list[FoldResult]
    model: MetricsReport
    baseline: MetricsReport


def train_pair(ds: PreparedDataset, fold: int, train_cfg: TrainConfig, model_cfg: ModelConfig | None = None):
    """Fit the scaler and both heads on one fold's train bucket."""
    base = model_cfg or ModelConfig(n_steps=ds.n_steps)
    if base.n_steps != ds.n_steps:
        raise UsageError(f"model config T={base.n_steps} does not match dataset T={ds.n_steps}")
    tr, va = ds.bucket("train", fold), ds.bucket("val", fold)
    if not tr:
        raise UsageError(f"fold {fold}: empty training bucket")
    stats = fit_scaler(tr, scale_latlon=train_cfg.scale_latlon)
    out = {}
    for comp, (target, width) in enumerate((("location", 2), ("time", 1))):
        cfg = ModelConfig(**{**base.to_dict(), "head_width": width})
        model = LandfallModel(cfg, seed=derive_seed(train_cfg.seed, fold, comp, 0))
        tcfg = TrainConfig(**{**asdict(train_cfg), "seed": derive_seed(train_cfg.seed, fold, comp, 1)})
        out[target] = train(model, tr, va, stats, tcfg)
    return out["location"], out["time"], stats


def evaluate_kfold(ds: PreparedDataset, train_cfg: TrainConfig | None = None,
                   model_cfg: ModelConfig | None = None, keep_models: bool = False) -> KFoldResult:
    """Train a location and a time model per fold and report mean/std of the test metrics."""
    train_cfg = train_cfg or TrainConfig()
    if ds.split.mode != "kfold":
        raise UsageError(f"evaluate_kfold needs a kfold split plan, got {ds.split.mode!r}")
    folds = []
    for f in range(len(ds.split.folds)):
        te = ds.bucket("test", f)
        if not te:
            raise UsageError(f"fold {f}: empty test bucket")
        (loc_model, loc_hist), (time_model, time_hist), stats = train_pair(ds, f, train_cfg, model_cfg)
        report = evaluate(loc_model, te, stats).merged(evaluate(time_model, te, stats))
        base = persistence_report(te)
        log.info("fold %d: distance %.1f km (baseline %.1f), time MAE %.2f h (baseline %.2f)",
                 f, report["mae_distance_km"], base["mae_distance_km"], report["mae_time"], base["mae_time"])
        folds.append(FoldResult(
            fold=f, model=report, baseline=base, location_history=loc_hist, time_history=time_hist,
            location_model=loc_model if keep_models else None,
            time_model=time_model if keep_models else None,
            stats=stats if keep_models else None,
        ))
    return KFoldResult(
        folds=folds,
        model=aggregate([f.model for f in folds]),
        baseline=aggregate([f.baseline for f in folds]),
    )


# ---------------------------------------------------------------- traces

TRACE_COLUMNS = (
    "unit_id", "t_end", "hours_since_formation",
    "pred_lat", "pred_lon", "pred_hours",
    "actual_lat", "actual_lon", "actual_hours", "distance_error_km",
)


def trace_cyclone(location_model: LandfallModel, time_model: LandfallModel, stats: ScalerStats,
                  unit: CycloneUnit, snapshots: np.ndarray, n_steps: int | None = None) -> list[dict]:
    """Predictions at every admissible window end of one cyclone, oldest first."""
    n_steps = n_steps or location_model.config.n_steps
    for m in (location_model, time_model):
        if m.config.n_steps != n_steps:
            raise UsageError(f"model expects T={m.config.n_steps}, trace requested T={n_steps}")
    samples, _ = _samples_from_frames(unit, unit_frames(unit, snapshots), n_steps)
    if not samples:
        return []
    loc = predict_location(location_model, samples, stats)
    hours = predict_hours(time_model, samples, stats)
    rows = []
    for s, (plat, plon), ph in zip(samples, loc, hours):
        rows.append({
            "unit_id": unit.id,
            "t_end": format_time(s.t_end),
            "hours_since_formation": s.hours_since_formation,
            "pred_lat": float(plat),
            "pred_lon": float(plon),
            "pred_hours": float(ph),
            "actual_lat": s.target_location[0],
            "actual_lon": s.target_location[1],
            "actual_hours": s.target_hours,
            "distance_error_km": float(haversine_km_array(s.target_location[0], s.target_location[1], plat, plon)),
        })
    return rows
