"""Command-line experiment runner.

    teefl run --config exp.yaml --out results/ [--seed N] [--rounds N] [--set key=value]...
    teefl summarize --metrics results/metrics.jsonl
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from teefl import config as cfgmod
from teefl.errors import ConfigurationError, TeeflError
from teefl.metrics import MetricsLog, summarize
from teefl.protocol import Simulation

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
METRICS_FILE = "metrics.jsonl"
TRANSCRIPT_FILE = "transcript.jsonl"


def _load(args) -> cfgmod.ExperimentConfig:
    raw = cfgmod.load_raw(args.config)
    for assignment in args.set or []:
        cfgmod.apply_override(raw, assignment)
    if args.seed is not None:
        raw["master_seed"] = args.seed
    if args.rounds is not None:
        raw.setdefault("stopping", {})["max_rounds"] = args.rounds
    return cfgmod.from_dict(raw)


def _progress(state) -> None:
    extra = f" discarded={state.outcome.discarded}" if state.outcome.scores else ""
    if state.backdoor_success is not None:
        extra += f" backdoor={state.backdoor_success:.3f}"
    print(f"round {state.round_index:3d}  loss={state.global_loss:.5f}  "
          f"acc={state.global_accuracy:.4f}  updates={len(state.received)}{extra}", flush=True)


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        sim = Simulation(cfg)
        log = sim.run(on_round=_progress)
    except ConfigurationError as exc:
        print(f"config error ({exc.module}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TeeflError as exc:
        print(f"runtime error in {exc.module}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        print(f"runtime error in {type(exc).__module__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out.mkdir(parents=True, exist_ok=True)
    log.write(out / METRICS_FILE)
    (out / TRANSCRIPT_FILE).write_text(
        "".join(json.dumps(m, sort_keys=True) + "\n" for m in sim.bus.export()))
    print(f"wrote {out / METRICS_FILE}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    try:
        log = MetricsLog.read(args.metrics)
    except FileNotFoundError:
        print(f"metrics file not found: {args.metrics}", file=sys.stderr)
        return EXIT_CONFIG
    except TeeflError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(summarize(log))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teefl", description="Federated learning across simulated enclaves.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log protocol events")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a YAML config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, help="override master_seed")
    run.add_argument("--rounds", type=int, help="override stopping.max_rounds")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config field by dotted path (repeatable)")
    run.set_defaults(func=cmd_run)

    summ = sub.add_parser("summarize", help="print a report for a metrics file")
    summ.add_argument("--metrics", required=True)
    summ.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
