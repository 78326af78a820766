"""Declarative experiment configuration (YAML on disk, pydantic in memory)."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from teefl import adversary, privacy
from teefl.errors import ConfigurationError
from teefl.model import LOGISTIC
from teefl.robust_agg import WEIGHTED_MEAN



class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    dim: int = Field(5, ge=2)
    kind: str = LOGISTIC


class DataSection(_Strict):
    n_samples: int = Field(200, ge=2)
    margin: float = Field(2.0, ge=0)
    eval_samples: int = Field(1000, ge=2)


class TriggerSection(_Strict):
    coords: tuple[int, ...] = (1, 2)
    offset: float = 3.0


class AdversarySection(_Strict):
    kind: Literal["none", "label-flip", "backdoor", "model-replacement"] = "none"
    fraction: float = Field(0.0, ge=0, le=1)
    boost: float = Field(1.0, ge=1)
    trigger: TriggerSection = TriggerSection()
    target_label: Literal[0, 1] = 0

    def build(self) -> adversary.AdversarySpec:
        return adversary.AdversarySpec(
            kind=self.kind, fraction=self.fraction, boost=self.boost,
            trigger=adversary.Trigger(tuple(self.trigger.coords), self.trigger.offset),
            target_label=self.target_label)


class PartySection(_Strict):
    id: int = Field(ge=0)
    n_samples: Optional[int] = Field(None, ge=2)
    margin: Optional[float] = Field(None, ge=0)
    adversary: AdversarySection = AdversarySection()
    model: Optional[ModelSection] = None
    tampered_code: bool = False


class DpSection(_Strict):
    enabled: bool = False
    clip_bound: float = Field(1.0, gt=0)
    noise_sigma: float = Field(0.01, ge=0)
    prune_threshold: float = Field(1e-3, ge=0)

    def build(self) -> privacy.DpConfig:
        return privacy.DpConfig(self.clip_bound, self.noise_sigma, self.prune_threshold, self.enabled)


class AggregationSection(_Strict):
    method: Literal["weighted-mean", "geometric-median"] = WEIGHTED_MEAN
    krum_enabled: bool = False
    krum_k: int = Field(0, ge=0)
    weights: Literal["dataset-size", "equal"] = "dataset-size"


class TrainingSection(_Strict):
    epochs: int = Field(1, ge=1)
    lr: float = Field(0.1, gt=0)
    batch: int = Field(32, ge=1)


class StoppingSection(_Strict):
    loss_threshold: float = Field(1e-6, gt=0)
    max_rounds: int = Field(20, ge=1)


class DropoutEvent(_Strict):
    round: int = Field(ge=1)
    party_id: int = Field(ge=0)
    when: Literal["before-training", "after-encryption", "after-submission"]


class RejoinEvent(_Strict):
    round: int = Field(ge=1)
    party_id: int = Field(ge=0)


class ExperimentConfig(_Strict):
    master_seed: int = Field(0, ge=0, lt=2**64)
    n_parties: int = Field(ge=1)
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    parties: list[PartySection] = []
    dp: DpSection = DpSection()
    aggregation: AggregationSection = AggregationSection()
    training: TrainingSection = TrainingSection()
    stopping: StoppingSection = StoppingSection()
    min_participants: int = Field(2, ge=1)
    dropout_schedule: list[DropoutEvent] = []
    rejoin_schedule: list[RejoinEvent] = []

    @model_validator(mode="after")
    def _cross_checks(self):
        problems = []
        agg = self.aggregation
        if agg.krum_enabled and not 2 * agg.krum_k + 2 < self.n_parties:
            problems.append(
                f"aggregation.krum_k: Multi-KRUM needs 2k+2 < n, got k={agg.krum_k}, "
                f"n={self.n_parties}")
        ids = [p.id for p in self.parties]
        if len(ids) != len(set(ids)):
            problems.append("parties: duplicate party id")
        for p in ids + [e.party_id for e in self.dropout_schedule + self.rejoin_schedule]:
            if p >= self.n_parties:
                problems.append(f"party id {p} out of range for n_parties={self.n_parties}")
        if self.min_participants > self.n_parties:
            problems.append("min_participants exceeds n_parties")
        for p in self.parties:
            trig = p.adversary.trigger
            dim = (p.model or self.model).dim
            if p.adversary.kind == "backdoor" and any(c < 0 or c >= dim for c in trig.coords):
                problems.append(f"parties[{p.id}].adversary.trigger.coords out of range for dim {dim}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def party(self, pid: int) -> PartySection:
        for p in self.parties:
            if p.id == pid:
                return p
        return PartySection(id=pid)

    def attacker_ids(self) -> list[int]:
        return sorted(p.id for p in self.parties if p.adversary.kind != "none")

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        path = ".".join(str(x) for x in err["loc"]) or "<root>"
        out.append(f"{path}: {err['msg']}")
    return out


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping", errors=["<root>: not a mapping"])
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        errors = _format_errors(exc)
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(errors), errors=errors) from None


def load_raw(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}", errors=[f"{path}: missing"])
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}", errors=[f"{path}: parse failure"]) from None
    return raw if raw is not None else {}


def parse_config(path) -> ExperimentConfig:
    return from_dict(load_raw(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not key=value",
                                 errors=[f"--set {assignment}: expected key=value"])
    key, value = assignment.split("=", 1)
    node = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override path {key!r} crosses a non-mapping",
                                     errors=[f"--set {key}: not a mapping"])
    node[parts[-1]] = yaml.safe_load(value)
    return raw
