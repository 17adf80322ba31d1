"""Desk-scale imbalanced synthetic dataset.

Every series belongs to one pattern class. The common classes are smooth
periodic signals; the rare class is a sawtooth with a different period.
All series carry randomly timed bumps that cannot be inferred from the past
alone, so a good reference is the only way to anticipate them.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from .data import RawSeries

COMMON_PERIODS = (12.0, 16.0, 24.0)
RARE_PERIOD = 9.0


def _signal(kind: int, s: np.ndarray, phase: float, amp: float) -> np.ndarray:
    if kind < len(COMMON_PERIODS):
        w = 2 * np.pi * (s / COMMON_PERIODS[kind] + phase)
        f0 = amp * np.sin(w)
        f1 = 0.6 * amp * np.cos(w) + 0.3 * np.sin(2 * w)
    else:
        frac = (s / RARE_PERIOD + phase) % 1.0
        f0 = amp * (2 * frac - 1)
        f1 = amp * np.where(frac < 0.5, 1.0, -1.0) * 0.6
    return np.stack([f0, f1], axis=1)


def generate(n_series: int = 40, length: int = 120, rare_fraction: float = 0.1,
             event_rate: float = 0.04, noise: float = 0.05, seed: int = 0) -> list[RawSeries]:
    rng = np.random.default_rng(seed)
    n_rare = max(1, int(round(rare_fraction * n_series)))
    kinds = np.concatenate([np.full(n_rare, len(COMMON_PERIODS)),
                            rng.integers(0, len(COMMON_PERIODS), n_series - n_rare)])
    kinds = kinds[rng.permutation(n_series)]
    s = np.arange(length, dtype=float)
    out = []
    for kind in kinds:
        x = _signal(int(kind), s, rng.random(), rng.uniform(0.8, 1.2))
        for centre in np.flatnonzero(rng.random(length) < event_rate):
            a = rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 2.0)
            width = rng.uniform(1.5, 3.0)
            bump = a * np.exp(-0.5 * ((s - centre) / width) ** 2)
            x[:, 0] += bump
            x[:, 1] += 0.5 * bump
        x += noise * rng.standard_normal(x.shape)
        out.append(RawSeries(x, s.copy(), ["f0", "f1"], int(kind)))
    return out


def rare_label() -> int:
    return len(COMMON_PERIODS)


def write_csv(series: list[RawSeries], path) -> Path:
    frames = []
    for i, rs in enumerate(series):
        df = pd.DataFrame(rs.values, columns=rs.feature_names)
        df.insert(0, "label", rs.category_label)
        df.insert(0, "series", i)
        df.insert(0, "timestamp", rs.timestamps.astype(int))
        frames.append(df)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames).to_csv(path, index=False, float_format="%.8g")
    return path
