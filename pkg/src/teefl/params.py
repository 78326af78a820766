"""Dense parameter-vector algebra and the federated average functions.

A parameter vector is a 1-D ``float64`` numpy array with at least one entry,
all finite. Every function here is pure.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from teefl.errors import InvalidInputError, ShapeError

ParameterVector = np.ndarray


def as_vector(values) -> ParameterVector:
    """Validate and convert ``values`` into a fresh 1-D float64 array."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"parameter vector must be 1-D, got shape {v.shape}")
    if v.size < 1:
        raise InvalidInputError("parameter vector must have dim >= 1")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("parameter vector contains non-finite entries")
    return v


def _stack(updates: Sequence) -> np.ndarray:
    if len(updates) == 0:
        raise InvalidInputError("need at least one update")
    vecs = [as_vector(u) for u in updates]
    dim = vecs[0].size
    for i, v in enumerate(vecs):
        if v.size != dim:
            raise ShapeError(f"update {i} has dim {v.size}, expected {dim}")
    return np.stack(vecs)


def l2_norm(v) -> float:
    v = as_vector(v)
    return float(np.sqrt(np.dot(v, v)))


def sq_distance(a, b) -> float:
    """Squared Euclidean distance ``sum((a - b)**2)``."""
    a, b = as_vector(a), as_vector(b)
    if a.size != b.size:
        raise ShapeError(f"dim mismatch: {a.size} vs {b.size}")
    d = a - b
    return float(np.dot(d, d))


def weighted_mean(updates: Sequence, weights: Sequence[float]) -> ParameterVector:
    """Return ``sum(w_i * V_i) / sum(w_i)``."""
    stacked = _stack(updates)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (stacked.shape[0],):
        raise InvalidInputError(
            f"expected {stacked.shape[0]} weights, got {w.size}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise InvalidInputError("total weight must be positive")
    return (w @ stacked) / total


def geometric_median(updates: Sequence, tol: float = 1e-9,
                     max_iter: int = 1000,
                     weights: Sequence[float] | None = None) -> ParameterVector:
    """Weighted geometric median by Weiszfeld iteration.

    Starts from the (weighted) coordinate-wise mean. When an iterate lands
    exactly on an input point, that point's term is dropped from the
    Weiszfeld step and the step is shrunk toward the current iterate by the
    Vardi-Zhang correction; if the remaining pull is no stronger than the
    coincident point's weight, the iterate is already optimal.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if max_iter < 1:
        raise InvalidInputError("max_iter must be positive")
    pts = _stack(updates)
    if weights is None:
        w = np.ones(pts.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (pts.shape[0],) or np.any(w < 0) or w.sum() <= 0:
            raise InvalidInputError("weights must be non-negative, one per update, positive total")
    y = (w @ pts) / w.sum()
    if pts.shape[0] == 1:
        return pts[0].copy()

    for _ in range(max_iter):
        dist = np.sqrt(np.sum((pts - y) ** 2, axis=1))
        coincident = dist == 0.0
        active = ~coincident & (w > 0)
        if not np.any(active):
            break
        inv = w[active] / dist[active]
        t = (inv @ pts[active]) / inv.sum()
        eta = w[coincident].sum()
        if eta > 0:
            r = np.sqrt(np.sum(((inv[:, None] * (pts[active] - y)).sum(axis=0)) ** 2))
            if r <= eta:
                break
            frac = eta / r
            y_next = (1.0 - frac) * t + frac * y
        else:
            y_next = t
        step = np.sqrt(np.sum((y_next - y) ** 2))
        y = y_next
        if step <= tol:
            break
    return y


def median_objective(x, updates: Sequence) -> float:
    """Sum of Euclidean distances from ``x`` to each update."""
    pts = _stack(updates)
    x = as_vector(x)
    return float(np.sqrt(np.sum((pts - x) ** 2, axis=1)).sum())
