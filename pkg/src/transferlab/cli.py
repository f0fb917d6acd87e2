"""``transferlab`` command line.

Exit status: 0 success, 2 configuration or path error, 3 numerical failure,
4 partial result (a compression point failed or a sweep cell was skipped).
Failures also print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attacks import METHODS, AttackConfig, TABLE1
from .config import ConfigError, ExperimentConfig, load_config
from .data import IdxError
from .model import CheckpointError, load
from .pipeline import Experiment
from .trainer import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4

logger = logging.getLogger("transferlab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", type=Path, help="YAML experiment file (defaults apply when omitted)")
    p.add_argument("--output-dir", type=Path, help="override output_dir")
    p.add_argument("--data-root", type=Path, help="override data.root")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--workers", type=int, help="override workers")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transferlab", description="Adversarial transferability between full and compressed networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the baseline checkpoint")
    _common(p)
    p.add_argument("--force", action="store_true", help="retrain even if an up-to-date checkpoint exists")

    p = sub.add_parser("compress", help="build one checkpoint per density and bitwidth sweep point")
    _common(p)
    p.add_argument("--kind", choices=["prune", "quant", "all"], default="all")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("attack", help="craft one adversarial batch on a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", type=Path, required=True, help="directory for the batch")

    p = sub.add_parser("sweep", help="run every scenario x attack x compression level")
    _common(p)
    p.add_argument("--kind", choices=["prune", "quant", "all"], default="all")

    p = sub.add_parser("cdf", help="weight and activation CDF tables of one checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--name", help="file stem for the CSVs (default: checkpoint stem)")

    p = sub.add_parser("report", help="recompute the trend summary from existing CSVs")
    _common(p)

    p = sub.add_parser("run", help="train, compress and sweep in one go")
    _common(p)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(**{
        "output_dir": None if args.output_dir is None else str(args.output_dir),
        "data.root": None if args.data_root is None else str(args.data_root),
        "seed": args.seed,
        "train.epochs": args.epochs,
        "workers": args.workers,
    })


def _kinds(kind: str) -> tuple[str, ...]:
    return ("prune", "quant") if kind == "all" else (kind,)


def _emit_error(code: int, exc: BaseException) -> int:
    record = {"error": type(exc).__name__, "exit": code, "message": str(exc)}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path is not None:
        record["path"] = str(path)
    print(json.dumps(record), file=sys.stderr)
    return code


def _setup_logging(exp: Experiment | None, verbose: bool) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if exp is not None:
        exp.logs.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(exp.logs / "run.log"))
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    for h in handlers:
        h.setFormatter(fmt)
    logger.handlers[:] = handlers
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def _run(args) -> int:
    cfg = _config(args)
    exp = Experiment(cfg)
    _setup_logging(exp, args.verbose)
    if args.command != "report":
        cfg.validate_paths()
    status = EXIT_OK

    if args.command in ("train", "run"):
        ckpt = exp.train_baseline(force=getattr(args, "force", False))
        print(f"baseline: {exp.baseline_path} test_accuracy={ckpt.metadata.get('test_accuracy')}")

    if args.command in ("compress", "run"):
        result = exp.compress(_kinds(getattr(args, "kind", "all")), force=getattr(args, "force", False))
        for d, path in sorted(result.prune.items()):
            print(f"density {d:g}: {path}")
        for b, path in sorted(result.quant.items()):
            print(f"bitwidth {b}: {path}")
        for name, msg in result.failures.items():
            print(f"FAILED {name}: {msg}")
        if result.failures:
            status = EXIT_PARTIAL

    if args.command in ("sweep", "run"):
        result = exp.sweep(_kinds(getattr(args, "kind", "all")))
        print(result.summary, end="")
        if result.skipped:
            print(f"{result.skipped} cells skipped")
            status = EXIT_PARTIAL

    if args.command == "attack":
        default_eps, default_iters = TABLE1.get(cfg.network, {}).get(args.method, (None, 1))
        eps = args.epsilon if args.epsilon is not None else default_eps
        if eps is None:
            raise ConfigError(f"--epsilon is required for {args.method}")
        attack = AttackConfig(args.method, eps, args.iterations or default_iters)
        batch = exp.attack(args.checkpoint, attack, args.out)
        print(f"{attack.label}: {len(batch)} samples, mean L2 {batch.l2.mean():.4f}, flagged {int(batch.flagged.sum())} -> {args.out}")

    if args.command == "cdf":
        exp.reports.mkdir(parents=True, exist_ok=True)
        name = args.name or args.checkpoint.stem
        w, a = exp.write_cdfs(name, load(args.checkpoint))
        print(f"weights CDF ({w.count} values) and activations CDF ({a.count} values) -> {exp.reports / 'cdf'}")

    if args.command == "report":
        result = exp.report()
        print(result.summary, end="")

    exp.write_manifest()
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, FileNotFoundError, IdxError, CheckpointError) as exc:
        return _emit_error(EXIT_CONFIG, exc)
    except NumericalError as exc:
        return _emit_error(EXIT_NUMERICAL, exc)
    except ValueError as exc:
        # invalid hyper-parameter combinations surface as ValueError from the domain types
        return _emit_error(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
