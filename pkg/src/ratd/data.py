"""CSV ingestion, sliding windows, z-score normalization and random splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .config import DatasetConfig
from .errors import ConfigError

log = logging.getLogger(__name__)

_TIMESTAMP_NAMES = {"t", "ts", "date", "time", "timestamp", "datetime", "ds"}


@dataclass(frozen=True)
class RawSeries:
    values: np.ndarray  # [time, d]
    timestamps: np.ndarray  # [time], strictly increasing
    feature_names: list[str]
    category_label: int | None = None
    rejected_rows: int = 0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        if len(self.timestamps) != len(self.values):
            raise ValueError("timestamps and values disagree in length")
        if not np.isfinite(self.values).all():
            raise ValueError("values contain missing entries")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.values)

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TimeSeriesWindow:
    history: np.ndarray  # [l, d]
    target: np.ndarray  # [h, d']
    start_index: int
    timestamps: np.ndarray  # [l + h]
    category_label: int | None = None
    series_id: int = 0
    full: np.ndarray = field(default=None, repr=False)  # [l + h, d], all features

    @property
    def l(self) -> int:
        return self.history.shape[0]

    @property
    def h(self) -> int:
        return self.target.shape[0]

    @property
    def rows(self) -> np.ndarray:
        return self.full


@dataclass(frozen=True)
class Normalizer:
    per_feature_mean: np.ndarray
    per_feature_std: np.ndarray
    fitted_on: str = "train"

    def apply(self, w: TimeSeriesWindow, target_features=None) -> TimeSeriesWindow:
        return _transform(w, self, target_features, invert=False)

    def invert(self, w: TimeSeriesWindow, target_features=None) -> TimeSeriesWindow:
        return _transform(w, self, target_features, invert=True)

    def invert_target(self, x: np.ndarray, target_features=None) -> np.ndarray:
        """Map normalized target-feature values [..., d'] back to data units."""
        idx = _feature_index(target_features, len(self.per_feature_mean))
        return x * self.per_feature_std[idx] + self.per_feature_mean[idx]


def _feature_index(target_features, d):
    return np.arange(d) if target_features is None else np.asarray(target_features, dtype=int)


def _transform(w, norm, target_features, invert):
    mu, sd = norm.per_feature_mean, norm.per_feature_std
    idx = _feature_index(target_features, len(mu))

    def f(x, m, s):
        return x * s + m if invert else (x - m) / s

    return replace(
        w,
        history=f(w.history, mu, sd),
        target=f(w.target, mu[idx], sd[idx]),
        full=None if w.full is None else f(w.full, mu, sd),
    )


# -- ingestion ---------------------------------------------------------------

def _parse_timestamps(col: pd.Series) -> np.ndarray:
    num = pd.to_numeric(col, errors="coerce")
    if num.notna().all():
        return num.to_numpy(dtype=float)
    dt = pd.to_datetime(col, errors="coerce", utc=True)
    if dt.isna().any():
        raise ValueError("unparseable timestamps")
    # seconds since epoch
    return (dt - pd.Timestamp(0, tz="UTC")).dt.total_seconds().to_numpy(dtype=float)


def _looks_like_time(df: pd.DataFrame, name: str) -> bool:
    if name.strip().lower() in _TIMESTAMP_NAMES:
        return True
    col = df[name]
    if pd.to_numeric(col, errors="coerce").notna().all():
        return False
    try:
        parsed = pd.to_datetime(col, errors="coerce", utc=True)
    except (ValueError, TypeError):
        return False
    return bool(parsed.notna().mean() > 0.9)


def _clean(values: np.ndarray, policy: str) -> tuple[np.ndarray, np.ndarray]:
    """Returns (values, kept_row_mask) after applying the missing-value policy."""
    bad = ~np.isfinite(values)
    if policy == "drop":
        keep = ~bad.any(axis=1)
        return values[keep], keep
    filled = pd.DataFrame(values).ffill().to_numpy()
    keep = np.isfinite(filled).all(axis=1)  # leading gaps have nothing to fill from
    return filled[keep], keep


def read_csv_series(path: str | Path, config: DatasetConfig) -> list[RawSeries]:
    """Load a CSV into one RawSeries per ``series_column`` group (or a single one)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing file: {p}")
    df = pd.read_csv(p)
    if df.shape[1] == 0:
        raise ValueError(f"{p}: no columns")

    ts_col = None
    if config.timestamp_column == "auto":
        if _looks_like_time(df, df.columns[0]):
            ts_col = df.columns[0]
    elif config.timestamp_column is not None:
        if config.timestamp_column not in df.columns:
            raise ConfigError(f"timestamp column {config.timestamp_column!r} not in {p}")
        ts_col = config.timestamp_column
    for name in (config.series_column, config.label_column):
        if name is not None and name not in df.columns:
            raise ConfigError(f"column {name!r} not in {p}")

    meta = {c for c in (ts_col, config.series_column, config.label_column) if c is not None}
    feature_cols = [c for c in df.columns if c not in meta]
    numeric = df[feature_cols].apply(pd.to_numeric, errors="coerce")
    feature_cols = [c for c in feature_cols if numeric[c].notna().any()]
    if not feature_cols:
        raise ValueError(f"{p}: no numeric columns")
    numeric = numeric[feature_cols]

    if config.series_column is None:
        groups = [(None, df.index)]
    else:
        groups = [(key, idx) for key, idx in df.groupby(config.series_column, sort=True).groups.items()]

    out = []
    need = config.l + config.h
    for _, idx in groups:
        raw = numeric.loc[idx].to_numpy(dtype=float)
        ts = _parse_timestamps(df.loc[idx, ts_col]) if ts_col is not None else np.arange(len(raw), dtype=float)
        rejected = int((~np.isfinite(raw)).any(axis=1).sum())
        vals, keep = _clean(raw, config.missing_policy)
        ts = ts[keep]
        if rejected:
            log.info("%s: %d rows with unparseable values (policy %r)", p.name, rejected, config.missing_policy)
        if len(vals) < need:
            raise ValueError(f"{p}: fewer than l+h rows ({len(vals)} < {need})")
        label = None
        if config.label_column is not None:
            labels = df.loc[idx, config.label_column].to_numpy()
            label = int(labels[keep][0])
        out.append(RawSeries(vals, ts, [str(c) for c in feature_cols], label, rejected))
    return out


def ingest_csv(path: str | Path, config: DatasetConfig) -> RawSeries:
    series = read_csv_series(path, config)
    if len(series) != 1:
        raise ValueError(f"{path}: expected a single series, found {len(series)}; use read_csv_series")
    return series[0]


# -- windows -----------------------------------------------------------------

def make_windows(series: RawSeries, l: int, h: int, stride: int = 1,
                 target_features=None, series_id: int = 0) -> list[TimeSeriesWindow]:
    if l <= 0 or h <= 0:
        raise ValueError("l and h must be positive")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = len(series)
    if n < l + h:
        raise ValueError(f"series shorter than l+h ({n} < {l + h})")
    idx = _feature_index(target_features, series.d)
    if idx.size == 0 or idx.max() >= series.d or idx.min() < 0:
        raise ValueError(f"target features {list(idx)} out of range for d={series.d}")
    windows = []
    for s in range(0, n - l - h + 1, stride):
        rows = series.values[s:s + l + h]
        windows.append(TimeSeriesWindow(
            history=rows[:l].copy(),
            target=rows[l:, idx].copy(),
            start_index=s,
            timestamps=series.timestamps[s:s + l + h].copy(),
            category_label=series.category_label,
            series_id=series_id,
            full=rows.copy(),
        ))
    return windows


def expected_window_count(length: int, l: int, h: int, stride: int) -> int:
    return (length - l - h) // stride + 1


def fit_normalizer(train_windows: list[TimeSeriesWindow], fitted_on: str = "train") -> Normalizer:
    if not train_windows:
        raise ValueError("cannot fit a normalizer on an empty training set")
    rows = np.concatenate([w.full if w.full is not None else w.history for w in train_windows])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Normalizer(mean, std, fitted_on)


def split(windows: list, ratios=(0.7, 0.1, 0.2), strategy: str = "random", seed: int = 0):
    if not windows:
        raise ValueError("cannot split an empty window list")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be 3 nonnegative values summing to 1, got {ratios}")
    n = len(windows)
    if strategy == "random":
        order = np.random.default_rng(seed).permutation(n)
    elif strategy == "sequential":
        order = np.arange(n)
    else:
        raise ValueError(f"unknown split strategy {strategy!r}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([windows[i] for i in sorted(p)] for p in parts)


def thin_windows(windows: list[TimeSeriesWindow], stride: int) -> list[TimeSeriesWindow]:
    """Keep windows whose starts are at least ``stride`` apart within each series."""
    kept, last = [], {}
    for w in sorted(windows, key=lambda w: (w.series_id, w.start_index)):
        prev = last.get(w.series_id)
        if prev is None or w.start_index - prev >= stride:
            kept.append(w)
            last[w.series_id] = w.start_index
    return kept


@dataclass
class WindowArrays:
    """Stacked view of a window list, convenient for batched model code."""

    history: np.ndarray  # [N, l, d]
    target: np.ndarray  # [N, h, d']
    full: np.ndarray  # [N, l + h, d]
    timestamps: np.ndarray  # [N, l + h]
    labels: np.ndarray  # [N], -1 when unlabeled

    def __len__(self):
        return len(self.history)


def stack_windows(windows: list[TimeSeriesWindow]) -> WindowArrays:
    if not windows:
        raise ValueError("no windows to stack")
    return WindowArrays(
        history=np.stack([w.history for w in windows]).astype(np.float32),
        target=np.stack([w.target for w in windows]).astype(np.float32),
        full=np.stack([w.full for w in windows]).astype(np.float32),
        timestamps=np.stack([w.timestamps for w in windows]).astype(np.float64),
        labels=np.array([-1 if w.category_label is None else w.category_label for w in windows]),
    )
