"""Regression error metrics and the metrics report container."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from tclandfall.errors import ShapeError


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"length mismatch: {y.size} actual vs {y_hat.size} predicted")
    if y.size == 0:
        raise ShapeError("empty input")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    d = y - y_hat
    return float(np.mean(d * d))


def rmse(y, y_hat) -> float:
    return float(np.sqrt(mse(y, y_hat)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


LOCATION_KEYS = ("rmse_lat", "rmse_lon", "mae_lat", "mae_lon", "mae_distance_km")
TIME_KEYS = ("rmse_time", "mae_time")
METRIC_KEYS = ("rmse_lat", "rmse_lon", "rmse_time", "mae_lat", "mae_lon", "mae_time", "mae_distance_km")


@dataclass
class MetricsReport:
    """Metric means (and across-fold std) for one model, baseline or fold aggregate."""

    metrics: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    n_samples: int = 0
    n_folds: int = 1

    def __getitem__(self, key):
        return self.metrics[key]

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        """Combine a location report with a time report over the same samples."""
        return MetricsReport(
            metrics={**self.metrics, **other.metrics},
            std={**self.std, **other.std},
            n_samples=max(self.n_samples, other.n_samples),
            n_folds=max(self.n_folds, other.n_folds),
        )

    def power_mean_ok(self) -> bool:
        pairs = (("rmse_lat", "mae_lat"), ("rmse_lon", "mae_lon"), ("rmse_time", "mae_time"))
        return all(
            self.metrics[m] >= 0.0 and self.metrics[r] >= self.metrics[m] * (1.0 - 1e-12)
            for r, m in pairs if r in self.metrics
        )


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Mean and population std of each metric across folds (a single fold has std 0)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = [k for k in METRIC_KEYS if all(k in r.metrics for r in reports)]
    out = MetricsReport(n_samples=sum(r.n_samples for r in reports), n_folds=len(reports))
    for k in keys:
        vals = np.array([r.metrics[k] for r in reports])
        out.metrics[k] = float(vals.mean())
        out.std[k] = float(vals.std())
    return out


REPORT_COLUMNS = (
    "basin", "T", "window_hours", "model", "dataset_size", "n_folds",
    *[c for k in METRIC_KEYS for c in (k, f"std_{k}")],
)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if np.isnan(x) else f"{x:.6f}"
    return str(x)


def report_rows_csv(rows: list[dict], columns=REPORT_COLUMNS) -> str:
    """Render report rows under a fixed header (:data:`REPORT_COLUMNS` by default)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, float("nan"))) for c in columns])
    return buf.getvalue()


def report_row(report: MetricsReport, basin: str, n_steps: int, model: str) -> dict:
    row = {
        "basin": basin, "T": n_steps, "window_hours": 3 * (n_steps - 1), "model": model,
        "dataset_size": report.n_samples, "n_folds": report.n_folds,
    }
    for k in METRIC_KEYS:
        row[k] = report.metrics.get(k, float("nan"))
        row[f"std_{k}"] = report.std.get(k, float("nan") if k not in report.metrics else 0.0)
    return row


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
