"""Per-round metrics records, JSON-lines I/O and the text summary."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from teefl.errors import TeeflError


class MetricsFormatError(TeeflError, ValueError):
    module = "cli"


TIMING_SUFFIX = "_ms"


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records + [self.summary]]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @classmethod
    def read(cls, path) -> "MetricsLog":
        text = Path(path).read_text()
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MetricsFormatError(f"line {lineno}: {exc}") from None
        if not rows:
            raise MetricsFormatError(f"{path}: empty metrics file")
        if rows[-1].get("type") != "summary" or any(r.get("type") != "round" for r in rows[:-1]):
            raise MetricsFormatError(f"{path}: expected round records followed by one summary")
        rounds = [r["round"] for r in rows[:-1]]
        if rounds != sorted(rounds) or len(set(rounds)) != len(rounds):
            raise MetricsFormatError(f"{path}: round indices are not monotone")
        return cls(rows[:-1], rows[-1])

    def without_timing(self) -> list[dict]:
        return [strip_timing(r) for r in self.records + [self.summary]]


def strip_timing(obj):
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if not k.endswith(TIMING_SUFFIX)}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def discard_rates(log: MetricsLog) -> dict[int, float]:
    """Per-attacker share of Krum-filtered rounds in which it was discarded."""
    rates = {}
    for pid in log.summary.get("attackers", []):
        seen = dropped = 0
        for r in log.records:
            if str(pid) in r.get("krum_scores", {}):
                seen += 1
                dropped += pid in r.get("discarded", [])
        rates[pid] = dropped / seen if seen else float("nan")
    return rates


def summarize(log: MetricsLog) -> str:
    s = log.summary
    out = [
        f"rounds executed : {s['rounds_executed']} (stop: {s['stop_reason']})",
        f"final loss      : {s['final_loss']:.6f}",
        f"final accuracy  : {s['final_accuracy']:.4f}",
        f"aggregation     : {s['aggregation']}"
        + (f" + Multi-KRUM k={s['krum_k']}" if s.get("krum_enabled") else ""),
        f"broadcast ok    : {s.get('broadcast_verified')}",
    ]
    attackers = s.get("attackers", [])
    if attackers:
        out.append("attackers:")
        rates = discard_rates(log)
        for pid in attackers:
            rate = rates[pid]
            shown = "n/a (Krum off)" if rate != rate else f"{rate:.2%}"
            out.append(f"  party {pid}: discard rate {shown}")
        if s.get("final_backdoor_success") is not None:
            out.append(f"  backdoor success rate: {s['final_backdoor_success']:.4f}")
    return "\n".join(out)
