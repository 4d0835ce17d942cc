"""Channelwise standard scaling fitted on training windows only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tclandfall.errors import UsageError


@dataclass
class ScalerStats:
    channel_mean: np.ndarray  # [12]
    channel_std: np.ndarray  # [12], zero-variance channels stored as 1
    target_mean: np.ndarray  # [2] lat, lon
    target_std: np.ndarray  # [2]
    scale_latlon: bool = True

    def _cast(self, shape_tail):
        mu = self.channel_mean.reshape((-1,) + (1,) * len(shape_tail))
        sd = self.channel_std.reshape((-1,) + (1,) * len(shape_tail))
        return mu, sd

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Scale windows ``[..., 12, H, W]``; returns float64."""
        x = np.asarray(x, dtype=np.float64)
        mu, sd = self._cast(x.shape[-2:])
        return (x - mu) / sd

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mu, sd = self._cast(x.shape[-2:])
        return x * sd + mu

    def scale_targets(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def unscale_targets(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean


def _guarded_std(var: np.ndarray, mean: np.ndarray) -> np.ndarray:
    sd = np.sqrt(var)
    # constant channels: float32 storage rounding leaves a residue far below any real spread
    tiny = sd <= 1e-9 * np.maximum(np.abs(mean), 1.0)
    return np.where(tiny, 1.0, sd)


def fit_scaler(samples: Sequence, scale_latlon: bool = True) -> ScalerStats:
    """Per-channel mean/std over every frame and grid cell of the training windows.

    Two passes (mean, then squared deviations) keep the variance accurate for
    large-offset channels such as geopotential. Location targets get their own
    mean/std; the hours target is never scaled.
    """
    if len(samples) == 0:
        raise UsageError("cannot fit a scaler on an empty training set")
    n_ch = samples[0].window.shape[1]
    count = 0
    total = np.zeros(n_ch)
    for s in samples:
        w = np.asarray(s.window, dtype=np.float64)
        total += w.sum(axis=(0, 2, 3))
        count += w.shape[0] * w.shape[2] * w.shape[3]
    mean = total / count
    sq = np.zeros(n_ch)
    for s in samples:
        d = np.asarray(s.window, dtype=np.float64) - mean[None, :, None, None]
        sq += (d * d).sum(axis=(0, 2, 3))
    std = _guarded_std(sq / count, mean)
    if not scale_latlon:
        mean[:2] = 0.0
        std[:2] = 1.0

    y = np.array([s.target_location for s in samples], dtype=np.float64)
    t_mean = y.mean(axis=0)
    t_std = _guarded_std(((y - t_mean) ** 2).mean(axis=0), t_mean)
    return ScalerStats(channel_mean=mean, channel_std=std, target_mean=t_mean, target_std=t_std,
                       scale_latlon=scale_latlon)


def apply_scaler(stats: ScalerStats, window: np.ndarray) -> np.ndarray:
    return stats.transform(window)
