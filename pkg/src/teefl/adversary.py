"""Poisoning attacks run by malicious parties."""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from teefl.errors import InvalidInputError, ShapeError
from teefl.model import Dataset, predict_proba
from teefl.params import ParameterVector, as_vector

NONE = "none"
LABEL_FLIP = "label-flip"
BACKDOOR = "backdoor"
MODEL_REPLACEMENT = "model-replacement"
KINDS = (NONE, LABEL_FLIP, BACKDOOR, MODEL_REPLACEMENT)


@dataclass(frozen=True)
class Trigger:
    """Additive offset on a fixed set of feature coordinates."""

    coords: tuple[int, ...] = (1, 2)
    offset: float = 3.0

    def apply(self, features: np.ndarray) -> np.ndarray:
        x = np.array(features, dtype=np.float64, copy=True)
        if max(self.coords) >= x.shape[-1] or min(self.coords) < 0:
            raise ShapeError(f"trigger coords {self.coords} out of range for dim {x.shape[-1]}")
        x[..., list(self.coords)] += self.offset
        return x


@dataclass(frozen=True)
class AdversarySpec:
    kind: str = NONE
    fraction: float = 0.0
    boost: float = 1.0
    trigger: Trigger = Trigger()
    target_label: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown adversary kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise InvalidInputError("fraction must lie in [0, 1]")
        if self.boost < 1.0:
            raise InvalidInputError("boost must be >= 1")
        if self.target_label not in (0, 1):
            raise InvalidInputError("target_label must be 0 or 1")

    @property
    def malicious(self) -> bool:
        return self.kind != NONE


def _pick(size: int, fraction: float, seed: int) -> np.ndarray:
    count = int(np.floor(fraction * size))
    return np.random.default_rng(seed).choice(size, size=count, replace=False)


def label_flip(data: Dataset, fraction: float, seed: int) -> Dataset:
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInputError("fraction must lie in [0, 1]")
    labels = data.labels.copy()
    idx = _pick(data.size, fraction, seed)
    labels[idx] = 1 - labels[idx]
    return Dataset(data.features.copy(), labels)


def backdoor_inject(data: Dataset, trigger: Trigger, target_label: int,
                    fraction: float, seed: int) -> Dataset:
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInputError("fraction must lie in [0, 1]")
    if max(trigger.coords) >= data.dim:
        raise ShapeError(f"trigger coords {trigger.coords} out of range for dim {data.dim}")
    x = data.features.copy()
    y = data.labels.copy()
    idx = _pick(data.size, fraction, seed)
    x[idx] = trigger.apply(x[idx])
    y[idx] = target_label
    return Dataset(x, y)


def model_replacement(honest_update, round_start_global, boost: float) -> ParameterVector:
    """Scale the update's displacement from the global model by ``boost``."""
    u, g = as_vector(honest_update), as_vector(round_start_global)
    if u.size != g.size:
        raise ShapeError(f"dim mismatch: {u.size} vs {g.size}")
    return g + boost * (u - g)


def poison_dataset(data: Dataset, spec: AdversarySpec, seed: int) -> Dataset:
    """Data-side transform for ``spec``; model replacement flips labels."""
    if spec.kind == BACKDOOR:
        return backdoor_inject(data, spec.trigger, spec.target_label, spec.fraction, seed)
    if spec.kind in (LABEL_FLIP, MODEL_REPLACEMENT):
        return label_flip(data, spec.fraction, seed)
    return data


def backdoor_success_rate(params, clean: Dataset, trigger: Trigger, target_label: int) -> float:
    """Share of clean non-target samples pushed to ``target_label`` by the trigger."""
    mask = clean.labels != target_label
    if not np.any(mask):
        raise InvalidInputError("no non-target samples to measure the backdoor on")
    p = predict_proba(params, trigger.apply(clean.features[mask]))
    pred = (p >= 0.5).astype(np.int64)
    return float(np.mean(pred == target_label))
