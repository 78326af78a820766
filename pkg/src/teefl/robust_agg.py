"""Multi-KRUM scoring/selection and the aggregation pass over survivors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from teefl.errors import AggregationError, ConfigurationError, InvalidInputError
from teefl.params import ParameterVector, _stack, geometric_median, weighted_mean

WEIGHTED_MEAN = "weighted-mean"
GEOMETRIC_MEDIAN = "geometric-median"
METHODS = (WEIGHTED_MEAN, GEOMETRIC_MEDIAN)


@dataclass(frozen=True)
class KrumScore:
    party_index: int
    score: float


@dataclass
class AggregationOutcome:
    selected: list[int]
    discarded: list[int]
    scores: list[KrumScore]
    global_params: ParameterVector
    access_order: list[int] = field(default_factory=list)


def check_resiliency(n: int, k: int) -> None:
    if k < 0:
        raise ConfigurationError("krum k must be non-negative")
    if not 2 * k + 2 < n:
        raise ConfigurationError(
            f"Multi-KRUM needs 2k+2 < n; got k={k}, n={n} (2k+2={2 * k + 2})")


def pairwise_sq_distances(pts: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - pts[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_scores(updates: Sequence, k: int) -> list[KrumScore]:
    """Sum of squared distances from each update to its n-k-2 nearest peers.

    Equal distances are resolved toward the lower peer index.
    """
    pts = _stack(updates)
    n = pts.shape[0]
    check_resiliency(n, k)
    m = n - k - 2
    dist = pairwise_sq_distances(pts)
    scores = []
    for i in range(n):
        peers = np.delete(np.arange(n), i)
        d = dist[i, peers]
        nearest = np.argsort(d, kind="stable")[:m]
        scores.append(KrumScore(i, float(d[nearest].sum())))
    return scores


def multi_krum_select(scores: Sequence[KrumScore], k: int) -> tuple[list[int], list[int]]:
    n = len(scores)
    if not 0 <= k < n:
        raise InvalidInputError(f"cannot discard {k} of {n} updates")
    ranked = sorted(scores, key=lambda s: (s.score, s.party_index))
    selected = sorted(s.party_index for s in ranked[:n - k])
    discarded = sorted(s.party_index for s in ranked[n - k:])
    return selected, discarded


def aggregate(updates: Sequence, selected: Sequence[int], weights: Sequence[float],
              method: str = WEIGHTED_MEAN, access_log: list | None = None,
              tol: float = 1e-9, max_iter: int = 1000) -> ParameterVector:
    """Apply the federated average function to the selected updates only.

    Updates are visited in ascending index order whatever their contents;
    ``access_log`` receives that order.
    """
    if len(selected) == 0:
        raise AggregationError("no updates selected for aggregation")
    if method not in METHODS:
        raise AggregationError(f"unknown aggregation method {method!r}")
    if len(weights) != len(updates):
        raise AggregationError("one weight per update is required")
    order = sorted(set(int(i) for i in selected))
    chosen, w = [], []
    for i in order:
        if access_log is not None:
            access_log.append(i)
        chosen.append(updates[i])
        w.append(weights[i])
    if method == WEIGHTED_MEAN:
        return weighted_mean(chosen, w)
    return geometric_median(chosen, tol=tol, max_iter=max_iter, weights=w)


def robust_aggregate(updates: Sequence, weights: Sequence[float], k: int | None,
                     method: str = WEIGHTED_MEAN) -> AggregationOutcome:
    """Krum-filter (when ``k`` is not None) and aggregate."""
    if k is None:
        selected, discarded, scores = list(range(len(updates))), [], []
    else:
        scores = krum_scores(updates, k)
        selected, discarded = multi_krum_select(scores, k)
    log: list[int] = []
    g = aggregate(updates, selected, weights, method, access_log=log)
    return AggregationOutcome(selected, discarded, scores, g, log)
