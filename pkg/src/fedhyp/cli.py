"""Command-line entry point: ``fedhyp {generate,pretrain,adapt,eval,run}``.

Configuration precedence, lowest to highest: built-in defaults, the config
file's ``defaults:`` section, its top-level keys, then command-line flags.

Exit codes: 0 success, 2 configuration error, 3 runtime or training error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from .client import ClientFailure
from .config import TOGGLES, ConfigError, RunConfig, load_config
from .data import clients_to_dataset, load_dataset, save_dataset
from .metrics import read_ledger
from .model import TrainingError, load_checkpoint, save_checkpoint
from .server import build_environment, evaluate, initial_prototypes, pretrain, run

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("fedhyp")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="runs/default")
    p.add_argument("--scenario", choices=("i", "ii", "iii"))
    p.add_argument("--workers", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedhyp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write source, client and test datasets")
    _common(p)

    p = sub.add_parser("pretrain", help="supervised source pretraining; writes a checkpoint")
    _common(p)

    for name, text in (("adapt", "federated adaptation from a checkpoint"),
                       ("run", "pretrain then adapt")):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "adapt":
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--ablate", default="",
                       help=f"comma-separated toggles from {', '.join(TOGGLES)}; runs the full on/off grid")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset .npz from 'generate' (default: the config's test split)")
    p.add_argument("--ledger", help="ledger.jsonl to report the source-only vs adapted gap from")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {"seed": args.seed, "scenario": args.scenario, "workers": args.workers, "rounds": args.rounds}
    return load_config(args.config, overrides)


def parse_ablate(spec: str) -> list[str]:
    names = [s.strip() for s in spec.split(",") if s.strip()]
    bad = [n for n in names if n not in TOGGLES]
    if bad:
        raise ConfigError(f"unknown ablation toggles {bad}; choose from {list(TOGGLES)}")
    if len(set(names)) != len(names):
        raise ConfigError("duplicate ablation toggles")
    return names


def ablation_grid(cfg: RunConfig, toggles: list[str]) -> list[tuple[str, RunConfig]]:
    """Every on/off combination of ``toggles``; each cell is named ``toggle-on_other-off``."""
    if not toggles:
        return [("", cfg)]
    cells = []
    for values in itertools.product((True, False), repeat=len(toggles)):
        name = "_".join(f"{t}-{'on' if v else 'off'}" for t, v in zip(toggles, values))
        cells.append((name, cfg.replace(**dict(zip(toggles, values)))))
    return cells


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    env = build_environment(cfg)
    save_dataset(out / "source.npz", env.source, {"split": "source", "seed": cfg.seed})
    save_dataset(out / "clients.npz", clients_to_dataset(env.clients), {"split": "clients", "scenario": cfg.scenario})
    save_dataset(out / "test.npz", env.test, {"split": "test", "seed": cfg.seed})
    print(f"source {len(env.source)}, clients {len(env.clients)}, test {len(env.test)} -> {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, out: Path) -> Path:
    env = build_environment(cfg)
    params, clf = pretrain(env.source, cfg, clf_channels=env.world.cue_channels)
    protos = initial_prototypes(params, env.source, cfg)
    path = save_checkpoint(out / "pretrained.npz", params, clf,
                           extra={"protos": protos.protos, "protos_present": protos.present},
                           meta={"round": 0, "seed": cfg.seed})
    metrics, _ = evaluate(params, clf, env.test, cfg, env.world)
    _write_json(out / "source_only.json", metrics)
    print(f"checkpoint {path}")
    print(format_report(metrics))
    return path


def cmd_adapt(cfg: RunConfig, out: Path, checkpoint: Path | None, toggles: list[str]) -> int:
    env = build_environment(cfg)
    if checkpoint is None:
        checkpoint = cmd_pretrain(cfg, out)
    for name, cell_cfg in ablation_grid(cfg, toggles):
        cell_dir = out / name if name else out
        result = run(cell_cfg, cell_dir, checkpoint=checkpoint, env=env)
        last = result.records[-1].metrics
        print(f"{name or 'run'}: {format_report(last)}  -> {cell_dir / 'ledger.jsonl'}")
    return EXIT_OK


def format_report(metrics: dict) -> str:
    return "  ".join(f"{k}={metrics[k]:.2f}" for k in ("car_miou", "drone_miou", "all", "clear", "night", "rain", "fog")
                     if k in metrics and metrics[k] is not None)


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: Path, dataset: Path | None, ledger: Path | None) -> int:
    ck = load_checkpoint(checkpoint)
    env = build_environment(cfg)
    ds = load_dataset(dataset) if dataset else env.test
    metrics, confs = evaluate(ck.params, ck.weather_clf, ds, cfg, env.world)
    report = {"checkpoint": str(checkpoint), "metrics": metrics,
              "confusions": {k: v.tolist() for k, v in confs.items()}}
    if ledger:
        _, rows = read_ledger(ledger)
        scored = [r for r in rows if r.get("type") == "round" and r.get("metrics")]
        if scored:
            first, last = scored[0]["metrics"], scored[-1]["metrics"]
            report["source_only"] = first
            report["adapted"] = last
            report["gap"] = {k: last[k] - first[k] for k in first if first[k] is not None and last.get(k) is not None}
    _write_json(out / "eval.json", report)
    print(format_report(metrics))
    if "gap" in report:
        print("gap vs source-only: " + "  ".join(f"{k}={v:+.2f}" for k, v in report["gap"].items()))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        cfg = resolve_config(args)
        toggles = parse_ablate(getattr(args, "ablate", "") or "")
        for attr in ("checkpoint", "dataset", "ledger"):
            value = getattr(args, attr, None)
            if value and not Path(value).is_file():
                raise ConfigError(f"--{attr}: file not found: {value}")
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "pretrain":
            cmd_pretrain(cfg, out)
            return EXIT_OK
        if args.command == "adapt":
            return cmd_adapt(cfg, out, Path(args.checkpoint), toggles)
        if args.command == "run":
            return cmd_adapt(cfg, out, None, toggles)
        return cmd_eval(cfg, out, Path(args.checkpoint), args.dataset and Path(args.dataset),
                        args.ledger and Path(args.ledger))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, ClientFailure, FloatingPointError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
