"""Categorical distributions and the divergence toolkit.

All divergences use natural logarithms; `js` is therefore bounded by ln 2.
Zero-probability handling follows the standard discrete surrogate: terms
with p_i = 0 contribute nothing to KL, and the second argument is clipped
at 1e-12 inside logs. `tv` is the total variation distance (half the L1
mass difference), the convention under which tv <= sqrt(2)*d_js holds.
"""

from __future__ import annotations

import numpy as np

from .numcore import DimensionError, NumericError

LOG_CLIP = 1e-12
SUM_TOL = 1e-9


def validate_categorical(p) -> np.ndarray:
    """Check a probability vector and absorb float drift in its sum.

    Entries must lie in [0, 1] and the sum must be within 1e-9 of 1; a
    smaller deviation is renormalized away, a larger one is an error.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise DimensionError(f"categorical must be a vector of length >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite entries in categorical")
    if p.min() < 0.0 or p.max() > 1.0 + SUM_TOL:
        raise ValueError(f"categorical entries outside [0, 1]: min {p.min()}, max {p.max()}")
    total = p.sum()
    if abs(total - 1.0) > SUM_TOL:
        raise ValueError(f"categorical sums to {total}, outside 1 +/- {SUM_TOL}")
    return p / total


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = validate_categorical(p)
    q = validate_categorical(q)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {q.shape}")
    return p, q


def kl(p, q) -> float:
    """Kullback-Leibler divergence sum(p * ln(p/q)), natural log."""
    p, q = _pair(p, q)
    mask = p > 0.0
    val = float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], LOG_CLIP))))
    return max(val, 0.0)


def js(p, q) -> float:
    """Jensen-Shannon divergence: mean KL of p and q to their midpoint."""
    p, q = _pair(p, q)
    mid = 0.5 * (p + q)
    return 0.5 * (kl(p, mid) + kl(q, mid))


def d_js(p, q) -> float:
    """Square root of the JS divergence; a metric on categoricals."""
    return float(np.sqrt(js(p, q)))


def tv(p, q) -> float:
    """Total variation distance: half the L1 difference, in [0, 1]."""
    p, q = _pair(p, q)
    return float(0.5 * np.sum(np.abs(p - q)))
