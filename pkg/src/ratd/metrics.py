"""Point and probabilistic forecast metrics."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ForecastEnsemble:
    samples: np.ndarray  # [m, h, d']
    history_id: int = -1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise ValueError("ensemble must be [m >= 1, h, d']")
        if not np.isfinite(self.samples).all():
            raise ValueError("ensemble contains non-finite values")


def _pair(pred, truth):
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return pred, truth


def mse(pred, truth, compat: bool = False) -> float:
    """Mean squared error. ``compat=True`` gives sqrt(mean|err|) instead."""
    pred, truth = _pair(pred, truth)
    if compat:
        return float(np.sqrt(np.mean(np.abs(pred - truth))))
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def crps_pointwise(samples, truth) -> np.ndarray:
    """Empirical CRPS per point: E|X - x| - 0.5 E|X - X'|.

    ``samples`` is [m, ...], ``truth`` is [...]. The pairwise term averages
    over all m^2 ordered pairs, which makes the result equal to the integral
    of (F_m(y) - 1{x <= y})^2 for the empirical CDF F_m.
    """
    s = np.asarray(samples, dtype=np.float64)
    x = np.asarray(truth, dtype=np.float64)
    if s.ndim < 1 or s.shape[0] < 1:
        raise ValueError("empty ensemble")
    if s.shape[1:] != x.shape:
        raise ValueError(f"ensemble shape {s.shape[1:]} does not match truth {x.shape}")
    m = s.shape[0]
    term1 = np.abs(s - x).mean(axis=0)
    # sum_{i,j} |s_i - s_j| = 2 * sum_i (2i - m + 1) s_(i) over sorted samples
    srt = np.sort(s, axis=0)
    w = (2 * np.arange(m) - m + 1).reshape((m,) + (1,) * x.ndim)
    term2 = 2.0 * (w * srt).sum(axis=0) / (m * m)
    return term1 - 0.5 * term2


def crps(ensemble, truth) -> float:
    samples = ensemble.samples if isinstance(ensemble, ForecastEnsemble) else ensemble
    return float(np.mean(crps_pointwise(samples, truth)))


def point_forecast(samples, how: str = "median") -> np.ndarray:
    """Collapse ensembles [..., m, h, d'] along the sample axis."""
    s = np.asarray(samples, dtype=np.float64)
    return np.median(s, axis=-3) if how == "median" else s.mean(axis=-3)


@dataclass
class MetricReport:
    mse: float
    mae: float
    crps: float
    per_horizon: dict = field(default_factory=dict)
    config_fingerprint: str = ""

    def to_dict(self):
        return asdict(self)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def evaluate_ensembles(samples, truth, point: str = "median", compat_mse: bool = False,
                       config_fingerprint: str = "") -> MetricReport:
    """Metrics for ensembles [N, m, h, d'] against truth [N, h, d'].

    MSE/MAE use the point forecast; CRPS is computed per dimension and averaged.
    """
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim != 4 or samples.shape[0] != truth.shape[0] or samples.shape[2:] != truth.shape[1:]:
        raise ValueError(f"ensemble shape {samples.shape} incompatible with truth {truth.shape}")
    if not np.isfinite(samples).all():
        raise ValueError("ensemble contains non-finite values")
    pred = point_forecast(samples, point)
    point_crps = crps_pointwise(np.moveaxis(samples, 1, 0), truth)  # [N, h, d']
    per_h = {
        "mse": ((pred - truth) ** 2).mean(axis=(0, 2)).tolist(),
        "mae": np.abs(pred - truth).mean(axis=(0, 2)).tolist(),
        "crps": point_crps.mean(axis=(0, 2)).tolist(),
    }
    return MetricReport(mse(pred, truth, compat_mse), mae(pred, truth), float(point_crps.mean()),
                        per_h, config_fingerprint)
