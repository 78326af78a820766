"""Clipping, Gaussian noising and magnitude pruning of party updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from teefl.errors import InvalidInputError
from teefl.params import ParameterVector, as_vector, l2_norm

PIPELINE_STAGES = ("clip", "noise", "prune")


@dataclass(frozen=True)
class DpConfig:
    # Defaults are simulation choices, not values taken from any source.
    clip_bound: float = 1.0
    noise_sigma: float = 0.01
    prune_threshold: float = 1e-3
    enabled: bool = False

    def __post_init__(self):
        if self.enabled and not self.clip_bound > 0:
            raise InvalidInputError("clip_bound must be positive when DP is enabled")
        if self.noise_sigma < 0 or self.prune_threshold < 0:
            raise InvalidInputError("noise_sigma and prune_threshold must be non-negative")


def clip(v, c: float) -> ParameterVector:
    if not c > 0:
        raise InvalidInputError("clip bound must be positive")
    v = as_vector(v)
    norm = l2_norm(v)
    if norm <= c:
        return v
    return v * (c / norm)


def add_gaussian_noise(v, sigma: float, rng: np.random.Generator) -> ParameterVector:
    if sigma < 0:
        raise InvalidInputError("sigma must be non-negative")
    v = as_vector(v)
    if sigma == 0:
        return v
    return v + rng.normal(0.0, sigma, size=v.size)


def prune_gradients(v, threshold: float) -> ParameterVector:
    if threshold < 0:
        raise InvalidInputError("threshold must be non-negative")
    v = as_vector(v)
    return np.where(np.abs(v) < threshold, 0.0, v)


def privatize(trained, round_start, cfg: DpConfig, rng: np.random.Generator,
              trace: list | None = None) -> ParameterVector:
    """Apply clip -> noise -> prune to ``trained - round_start``.

    The round-start global is added back so the result is a full parameter
    vector. Stage names are appended to ``trace`` in execution order.
    """
    trained = as_vector(trained)
    if not cfg.enabled:
        return trained
    delta = trained - as_vector(round_start)
    delta = clip(delta, cfg.clip_bound)
    _mark(trace, "clip")
    delta = add_gaussian_noise(delta, cfg.noise_sigma, rng)
    _mark(trace, "noise")
    delta = prune_gradients(delta, cfg.prune_threshold)
    _mark(trace, "prune")
    return round_start + delta


def _mark(trace, stage):
    if trace is not None:
        trace.append(stage)
