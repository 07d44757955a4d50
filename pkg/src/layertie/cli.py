"""Command-line entry point: ``layertie train | replay | report``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ablations
from .config import ConfigError, apply_overrides, config_from_dict, load_config
from .data import DataError, load_corpus
from .model import ModelError, TrainingStepError
from .report import ReportError, write_reports
from .trainer import train
from .tying import TyingError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("layertie")


def _overrides(args) -> list[str]:
    items = list(args.set or [])
    if getattr(args, "mode", None):
        items.append(f"trainer.mode={json.dumps(args.mode)}")
    if getattr(args, "pattern", None):
        items.append(f"trainer.pattern={json.dumps(args.pattern)}")
    if args.seed is not None:
        items += [f"{sec}.seed={args.seed}" for sec in ("trainer", "model", "controller")]
    if args.steps is not None:
        items.append(f"trainer.steps={args.steps}")
    return items


def _run(raw: dict, args, default_id: str) -> Path:
    cfg = config_from_dict(raw)
    corpus = load_corpus(cfg.data.path, cfg.data.val_fraction, cfg.model.context_length)
    run_dir = Path(args.out) / (args.run_id or default_id)
    result = train(cfg, corpus, run_dir, progress=args.verbose)
    s = result.summary
    print(f"run directory: {run_dir}")
    print(f"best validation perplexity: {s['best_val_ppl']:.4f} (step {s['best_val_step']})")
    if s.get("records"):
        print(f"mean independent layers: {s['mean_independent_layers']:.3f}, "
              f"final state: {s['final_state']}")
    return run_dir


def cmd_train(args) -> int:
    raw = apply_overrides(load_config(args.config), _overrides(args))
    t = raw.get("trainer", {})
    default_id = f"{t.get('mode', 'dynamic')}"
    if t.get("pattern"):
        default_id += f"-{t['pattern']}"
    default_id += f"-seed{t.get('seed', 0)}"
    _run(raw, args, default_id)
    return EXIT_OK


def cmd_replay(args) -> int:
    source = Path(args.source)
    traj = source / "trajectory.jsonl" if source.is_dir() else source
    if not traj.is_file():
        raise ablations.ReplayError(f"trajectory file not found: {traj}")
    if args.config:
        raw = load_config(args.config)
    elif source.is_dir() and (source / "config.json").is_file():
        raw = load_config(source / "config.json")
    else:
        raw = {}
    raw.setdefault("trainer", {})
    raw["trainer"].update({"mode": "replay", "replay_trajectory": str(traj), "pattern": None,
                           "custom_state": None})
    permutation = None
    if args.permutation:
        try:
            permutation = json.loads(Path(args.permutation).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"permutation file not found: {args.permutation}") from exc
    raw["trainer"]["permutation"] = permutation
    raw = apply_overrides(raw, _overrides(args))
    default_id = f"replay-{'perm-' if permutation else ''}{source.stem if not source.is_dir() else source.name}"
    _run(raw, args, default_id)
    return EXIT_OK


def cmd_report(args) -> int:
    for p in write_reports(args.run_dir, args.which):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layertie", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def run_opts(p):
        p.add_argument("--config", help="JSON config with model/trainer/controller/data sections")
        p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                       help="dotted-key override, repeatable")
        p.add_argument("--seed", type=int, help="seed for data, model init and controller")
        p.add_argument("--steps", type=int, help="total trainer steps K")
        p.add_argument("--out", default="runs", help="root directory for run outputs")
        p.add_argument("--run-id", help="run directory name under --out")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train a model")
    run_opts(p)
    p.add_argument("--mode", choices=("dynamic", "conventional", "fixed_pattern"))
    p.add_argument("--pattern", choices=("cycle", "cycle_rev", "sequence", "fixed_custom"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("replay", help="replay a recorded tying trajectory")
    p.add_argument("source", help="run directory or trajectory.jsonl")
    p.add_argument("--permutation", help="JSON file holding a layer permutation")
    run_opts(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="write plot-ready reports for a run")
    p.add_argument("run_dir")
    p.add_argument("--which", default="all",
                   choices=("map", "events", "hist", "corr", "summary", "all"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, ModelError, TyingError, ReportError,
            ablations.ReplayError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingStepError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
