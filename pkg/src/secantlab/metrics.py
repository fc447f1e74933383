"""Two-sample discrepancies for comparing generated and reference point sets."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .data import make_rng
from .errors import ShapeError

SUBSAMPLE_LIMIT = 10_000


def _as_set(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be an [n, d] array")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _subsample(a, seed):
    if len(a) <= SUBSAMPLE_LIMIT:
        return a
    idx = make_rng((seed, 9101)).choice(len(a), SUBSAMPLE_LIMIT, replace=False)
    return a[np.sort(idx)]


def _mean_dist(a, b):
    # Row-blocked to bound memory; fixed block order keeps the sum deterministic.
    total = 0.0
    for i in range(0, len(a), 1000):
        total += cdist(a[i:i + 1000], b).sum()
    return total / (len(a) * len(b))


def energy_distance(a, b, seed: int = 0) -> float:
    """2 E|A - B| - E|A - A'| - E|B - B'| over all pairs (V-statistic).

    Sets larger than SUBSAMPLE_LIMIT points are reduced to a fixed-seed subsample of
    that many rows. The V-statistic is exactly zero for identical sets.
    """
    a, b = _as_set(a, "a"), _as_set(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("energy_distance needs at least two points per set")
    a, b = _subsample(a, seed), _subsample(b, seed + 1)
    value = 2.0 * _mean_dist(a, b) - _mean_dist(a, a) - _mean_dist(b, b)
    return max(float(value), 0.0)


def moment_error(a, b) -> tuple[float, float]:
    """(|mean_a - mean_b|, Frobenius norm of cov_a - cov_b)."""
    a, b = _as_set(a, "a"), _as_set(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("moment_error needs at least two points per set")
    mean_gap = float(np.linalg.norm(a.mean(0) - b.mean(0)))
    cov_gap = float(np.linalg.norm(np.atleast_2d(np.cov(a.T)) - np.atleast_2d(np.cov(b.T))))
    return mean_gap, cov_gap
