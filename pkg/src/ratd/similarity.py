"""Non-learned similarity measures used as retrieval baselines."""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _dtw_table(a, b):
    n, m = a.shape[0], b.shape[0]
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = 0.0
            for f in range(a.shape[1]):
                diff = a[i - 1, f] - b[j - 1, f]
                c += diff * diff
            c = np.sqrt(c)
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = c + best
    return D[n, m]


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def dtw_distance(a, b) -> float:
    """Classic DTW with Euclidean per-step cost and (1,0)/(0,1)/(1,1) steps."""
    a, b = _as_2d(a), _as_2d(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("dtw_distance needs non-empty series")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature count mismatch: {a.shape[1]} vs {b.shape[1]}")
    return float(_dtw_table(np.ascontiguousarray(a), np.ascontiguousarray(b)))


@nb.njit(cache=True)
def _dtw_many(query, bank):
    out = np.empty(bank.shape[0])
    for i in range(bank.shape[0]):
        out[i] = _dtw_table(query, bank[i])
    return out


def dtw_to_bank(query, bank) -> np.ndarray:
    """DTW from one query [n, d] to every series in bank [N, n, d]."""
    q = np.ascontiguousarray(_as_2d(query))
    bank = np.ascontiguousarray(np.asarray(bank, dtype=np.float64))
    return _dtw_many(q, bank)


def pearson_similarity(a, b) -> float:
    """Mean over features of the per-feature Pearson coefficient.

    A feature with zero variance in either series contributes 0.
    """
    a, b = _as_2d(a), _as_2d(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(pearson_to_bank(a, b[None])[0])


def pearson_to_bank(query, bank) -> np.ndarray:
    q = _as_2d(query)
    bank = np.asarray(bank, dtype=np.float64)
    qc = q - q.mean(axis=0)
    bc = bank - bank.mean(axis=1, keepdims=True)
    num = np.einsum("tf,ntf->nf", qc, bc)
    den = np.sqrt((qc ** 2).sum(axis=0))[None, :] * np.sqrt((bc ** 2).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(r, -1.0, 1.0).mean(axis=1)
