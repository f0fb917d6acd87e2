"""Experiment orchestration: baseline training, compression sweeps, attack sweeps and reports.

Every artefact lives under the configured output directory::

    checkpoints/   baseline.ckpt, prune_d0.10.ckpt, quant_b4.ckpt, ...
    reports/       prune_sweep.csv, quant_sweep.csv, attack_stats.csv, cdf/, summary.txt
    logs/          training logs and the run log
    manifest.json  config hash, code version and artefact list

Checkpoints carry a ``recipe`` digest of everything that produced them.  A
stage whose checkpoint already exists with a matching recipe is not re-run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .attacks import AdversarialBatch, AttackConfig, AuditLog, generate, save_batch
from .compression import density, prune, quantise_model
from .config import ExperimentConfig
from .data import LabeledDataset, attack_subset, load_mnist
from .model import Checkpoint, init_checkpoint, load, predict, save
from .trainer import evaluate, train, write_log
from .transfer import CdfTable, CompressedModel, ScenarioReport, cdf, sweep
from .trends import AttackStats, TrendCheck, check_trends, render_summary

__all__ = ["Experiment", "CompressResult", "SweepResult", "code_version", "density_tag"]

logger = logging.getLogger(__name__)


def code_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def density_tag(d: float) -> str:
    return f"{d:.2f}" if round(d, 2) == d else f"{d:g}"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _dataset_digest(ds: LabeledDataset) -> str:
    h = hashlib.sha256(ds.images.tobytes())
    h.update(ds.labels.tobytes())
    return h.hexdigest()[:16]


@dataclass
class CompressResult:
    prune: dict[float, Path] = field(default_factory=dict)
    quant: dict[int, Path] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


@dataclass
class SweepResult:
    prune: ScenarioReport | None
    quant: ScenarioReport | None
    checks: list[TrendCheck]
    summary: str

    @property
    def skipped(self) -> int:
        return sum(len(r.skipped()) for r in (self.prune, self.quant) if r is not None)


class Experiment:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = Path(config.output_dir)
        self.checkpoints = self.root / "checkpoints"
        self.reports = self.root / "reports"
        self.logs = self.root / "logs"
        self.architecture = config.build_architecture()

    # ------------------------------------------------------------------ data

    @cached_property
    def train_set(self) -> LabeledDataset:
        return load_mnist(self.config.data_root(), "train", pad=self.config.data.pad)

    @cached_property
    def test_set(self) -> LabeledDataset:
        return load_mnist(self.config.data_root(), "test", pad=self.config.data.pad)

    @cached_property
    def attack_set(self) -> LabeledDataset:
        return attack_subset(self.test_set, self.config.data.attack_subset)

    # ---------------------------------------------------------------- layout

    def _dirs(self) -> None:
        for d in (self.checkpoints, self.reports, self.logs):
            d.mkdir(parents=True, exist_ok=True)

    @property
    def baseline_path(self) -> Path:
        return self.checkpoints / "baseline.ckpt"

    def prune_path(self, d: float) -> Path:
        return self.checkpoints / f"prune_d{density_tag(d)}.ckpt"

    def quant_path(self, bitwidth: int) -> Path:
        return self.checkpoints / f"quant_b{bitwidth}.ckpt"

    def write_manifest(self) -> Path:
        self._dirs()
        artefacts = sorted(str(p.relative_to(self.root)) for p in self.root.rglob("*") if p.is_file() and p.name != "manifest.json" and p.parent != self.logs)
        manifest = {
            "version": code_version(),
            "config_hash": self.config.digest(),
            "config": json.loads(self.config.canonical_json()),
            "artefacts": artefacts,
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def _reuse(path: Path, recipe: str) -> Checkpoint | None:
        if not path.exists():
            return None
        try:
            ckpt = load(path)
        except Exception:  # noqa: BLE001 - unreadable files are rebuilt
            return None
        return ckpt if ckpt.metadata.get("recipe") == recipe else None

    # ----------------------------------------------------------------- train

    def baseline_recipe(self) -> str:
        return _digest(
            {
                "architecture": self.architecture.to_text(),
                "train": self.config.train_config().as_dict(),
                "data": _dataset_digest(self.train_set),
            }
        )

    def train_baseline(self, force: bool = False) -> Checkpoint:
        self._dirs()
        recipe = self.baseline_recipe()
        if not force and (ckpt := self._reuse(self.baseline_path, recipe)) is not None:
            logger.info("reusing %s", self.baseline_path)
            return ckpt
        ckpt = init_checkpoint(self.architecture, seed=self.config.seed)
        result = train(ckpt, self.train_set, self.config.train_config(), self.test_set)
        ckpt = result.checkpoint
        ckpt.metadata["test_accuracy"] = f"{evaluate(ckpt, self.test_set):.6f}"
        ckpt.metadata["recipe"] = recipe
        write_log(result.log, self.logs / "train_baseline.csv")
        save(ckpt, self.baseline_path)
        return ckpt

    def baseline(self) -> Checkpoint:
        if not self.baseline_path.exists():
            raise FileNotFoundError(f"baseline checkpoint not found: {self.baseline_path}")
        return load(self.baseline_path)

    # -------------------------------------------------------------- compress

    def point_recipe(self, baseline: Checkpoint, kind: str, value) -> str:
        section = self.config.prune if kind == "prune" else self.config.quantise
        return _digest({"kind": kind, "value": value, "section": section.model_dump(mode="json"), "seed": self.config.seed, "baseline": baseline.fingerprint()})

    def compress_point(self, baseline: Checkpoint, kind: str, value, force: bool = False) -> Path:
        path = self.prune_path(value) if kind == "prune" else self.quant_path(value)
        recipe = self.point_recipe(baseline, kind, value)
        if not force and self._reuse(path, recipe) is not None:
            logger.info("reusing %s", path)
            return path
        if kind == "prune":
            ckpt = prune(baseline, self.config.prune.build(value, self.config.seed), self.train_set)
            logger.info("pruned to density %.4f", density(ckpt))
        else:
            fmt = self.config.quantise.format(value)
            act = fmt if self.config.quantise.activations else None
            ckpt = quantise_model(baseline, fmt, act, self.config.quantise.fine_tune.build(self.config.seed), self.train_set)
        ckpt.metadata["test_accuracy"] = f"{evaluate(ckpt, self.test_set):.6f}"
        ckpt.metadata["recipe"] = recipe
        save(ckpt, path)
        return path

    def compress(self, kinds=("prune", "quant"), force: bool = False) -> CompressResult:
        """One checkpoint per sweep point; a failing point is recorded and the rest continue."""
        self._dirs()
        baseline = self.baseline()
        points = []
        if "prune" in kinds:
            points += [("prune", d) for d in self.config.prune.densities]
        if "quant" in kinds:
            points += [("quant", b) for b in self.config.quantise.bitwidths]
        out = CompressResult()

        def record(kind, value, outcome):
            name = f"{kind}:{value:g}"
            if isinstance(outcome, Exception):
                logger.error("compression point %s failed: %s", name, outcome)
                out.failures[name] = f"{type(outcome).__name__}: {outcome}"
            elif kind == "prune":
                out.prune[value] = outcome
            else:
                out.quant[value] = outcome

        if self.config.workers > 1 and len(points) > 1:
            with ProcessPoolExecutor(self.config.workers) as pool:
                futures = [(k, v, pool.submit(_compress_worker, self.config.model_dump_json(), k, v, force)) for k, v in points]
                for k, v, fut in futures:
                    try:
                        record(k, v, fut.result())
                    except Exception as exc:  # noqa: BLE001
                        record(k, v, exc)
        else:
            for k, v in points:
                try:
                    record(k, v, self.compress_point(baseline, k, v, force))
                except Exception as exc:  # noqa: BLE001
                    record(k, v, exc)
        return out

    # ---------------------------------------------------------------- attack

    def attack(self, checkpoint_path, attack: AttackConfig, out_dir) -> AdversarialBatch:
        ckpt = load(checkpoint_path)
        ds = self.attack_set
        batch = generate(ckpt, ds.images, ds.labels, attack)
        save_batch(batch, out_dir)
        return batch

    # ------------------------------------------------------------------ cdf

    def cdf_images(self) -> np.ndarray:
        return self.attack_set.images[: self.config.data.cdf_images]

    def write_cdfs(self, name: str, ckpt: Checkpoint) -> tuple[CdfTable, CdfTable]:
        result = cdf(ckpt, self.cdf_images())
        result.weights.to_csv(self.reports / "cdf" / f"{name}_weights.csv")
        result.activations.to_csv(self.reports / "cdf" / f"{name}_activations.csv")
        return result.weights, result.activations

    # ----------------------------------------------------------------- sweep

    def _load_points(self, kind: str) -> list[CompressedModel]:
        out = []
        values = self.config.prune.densities if kind == "prune" else self.config.quantise.bitwidths
        for v in values:
            path = self.prune_path(v) if kind == "prune" else self.quant_path(v)
            if not path.exists():
                raise FileNotFoundError(f"compressed checkpoint not found: {path}")
            out.append(CompressedModel("density" if kind == "prune" else "bitwidth", float(v), load(path)))
        return out

    def sweep(self, kinds=("prune", "quant")) -> SweepResult:
        self._dirs()
        attacks = self.config.attack_configs()
        baseline = self.baseline()
        ds = self.attack_set
        audit = AuditLog()
        reports: dict[str, ScenarioReport] = {}
        stats: dict[str, AttackStats] = {}
        for kind in kinds:
            points = self._load_points(kind)
            report = sweep(baseline, points, attacks, ds, audit=audit, keep_batches=True)
            report.to_csv(self.reports / f"{kind}_sweep.csv")
            reports[kind] = report
            if not stats:
                stats = self._attack_stats(baseline, report, ds)
        if stats:
            _write_attack_stats(stats, self.reports / "attack_stats.csv")
        if "quant" in kinds:
            self.write_cdfs("baseline", baseline)
            for cm in self._load_points("quant"):
                self.write_cdfs(f"quant_b{int(cm.axis_value)}", cm.checkpoint)
        result = self.report()
        for r in reports.values():
            for row in r.rows:
                row.batch = None
        return result

    def _attack_stats(self, baseline: Checkpoint, report: ScenarioReport, ds: LabeledDataset) -> dict[str, AttackStats]:
        clean_ok = predict(baseline, ds.images) == ds.labels
        out = {}
        for row in report.rows:
            # full_to_comp batches are crafted on the baseline
            if row.scenario != "full_to_comp" or row.batch is None or row.attack in out:
                continue
            adv_ok = predict(baseline, row.batch.adversarial) == ds.labels
            success = clean_ok & ~adv_ok
            med = float(np.median(row.batch.l2[success])) if success.any() else math.nan
            out[row.attack] = AttackStats(row.attack, len(ds), int(success.sum()), med)
        return out

    # ---------------------------------------------------------------- report

    def report(self) -> SweepResult:
        """Re-derive the trend summary from the CSVs already on disk."""
        prune_csv, quant_csv = self.reports / "prune_sweep.csv", self.reports / "quant_sweep.csv"
        pr = ScenarioReport.from_csv(prune_csv) if prune_csv.exists() else None
        qr = ScenarioReport.from_csv(quant_csv) if quant_csv.exists() else None
        stats = _read_attack_stats(self.reports / "attack_stats.csv")
        base_acc = None
        if self.baseline_path.exists():
            acc = load(self.baseline_path).metadata.get("test_accuracy")
            base_acc = float(acc) if acc else None
        w_cdfs, a_cdfs, a_max = {}, {}, {}
        for b in self.config.quantise.bitwidths:
            wp = self.reports / "cdf" / f"quant_b{b}_weights.csv"
            ap = self.reports / "cdf" / f"quant_b{b}_activations.csv"
            if wp.exists() and ap.exists():
                w_cdfs[b], a_cdfs[b] = _read_cdf(wp), _read_cdf(ap)
                a_max[b] = self.config.quantise.format(b).max_value
        checks = check_trends(
            pr, qr,
            baseline_accuracy=base_acc,
            attack_stats=stats or None,
            weight_cdfs=w_cdfs or None,
            activation_cdfs=a_cdfs or None,
            activation_max=a_max or None,
        )
        summary = render_summary(checks)
        self._dirs()
        (self.reports / "summary.txt").write_text(summary)
        return SweepResult(pr, qr, checks, summary)


def _compress_worker(config_json: str, kind: str, value, force: bool) -> Path:
    exp = Experiment(ExperimentConfig.model_validate_json(config_json))
    return exp.compress_point(exp.baseline(), kind, value, force)


def _write_attack_stats(stats: dict[str, AttackStats], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "n", "n_success", "median_l2_success"])
        for s in sorted(stats.values(), key=lambda s: s.attack):
            w.writerow([s.attack, s.n, s.n_success, f"{s.median_l2_success:.6f}"])


def _read_attack_stats(path: Path) -> dict[str, AttackStats]:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {r["attack"]: AttackStats(r["attack"], int(r["n"]), int(r["n_success"]), float(r["median_l2_success"])) for r in csv.DictReader(fh)}


def _read_cdf(path: Path) -> CdfTable:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return CdfTable(data[:, 0], data[:, 1], len(data))
