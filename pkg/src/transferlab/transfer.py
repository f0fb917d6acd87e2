"""Attack scenarios between baseline and compressed models, sweeps and distribution analyses.

Three scenarios are distinguished by where adversarial samples are crafted
and where they are applied:

* ``comp_to_comp``: crafted on a compressed model, applied to the same model;
* ``full_to_comp``: crafted on the baseline, applied to a compressed model;
* ``comp_to_full``: crafted on a compressed model, applied to the baseline.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import AdversarialBatch, AttackConfig, AuditLog, generate
from .data import LabeledDataset
from .model import Checkpoint, forward, predict

__all__ = [
    "Scenario",
    "ScenarioError",
    "ScenarioRow",
    "ScenarioReport",
    "CompressedModel",
    "CdfTable",
    "run_scenario",
    "sweep",
    "cdf",
    "ecdf_at",
    "preferred_density",
    "REPORT_HEADER",
]

logger = logging.getLogger(__name__)

REPORT_HEADER = [
    "axis_kind",
    "axis_value",
    "attack",
    "scenario",
    "clean_acc",
    "adv_acc",
    "mean_l2",
    "median_l2",
    "linf",
    "n_flagged",
]
CDF_KNOTS = 512


class Scenario(str, enum.Enum):
    COMP_TO_COMP = "comp_to_comp"
    FULL_TO_COMP = "full_to_comp"
    COMP_TO_FULL = "comp_to_full"

    @property
    def number(self) -> int:
        return list(Scenario).index(self) + 1

    def roles(self, baseline, compressed):
        """(source, target) checkpoints for this scenario."""
        if self is Scenario.COMP_TO_COMP:
            return compressed, compressed
        if self is Scenario.FULL_TO_COMP:
            return baseline, compressed
        return compressed, baseline


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioRow:
    axis_kind: str
    axis_value: float
    attack: str
    scenario: str
    clean_acc: float = math.nan
    adv_acc: float = math.nan
    mean_l2: float = math.nan
    median_l2: float = math.nan
    linf: float = math.nan  # largest per-sample L-infinity perturbation
    n_flagged: int = 0
    skipped: str | None = None
    batch: AdversarialBatch | None = field(default=None, repr=False, compare=False)
    adv_correct: np.ndarray | None = field(default=None, repr=False, compare=False)

    def csv_fields(self) -> list[str]:
        def num(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

        head = [self.axis_kind, f"{self.axis_value:g}", self.attack, self.scenario]
        if self.skipped is not None:
            return head + ["", "skipped", "", "", "", ""]
        return head + [num(self.clean_acc), num(self.adv_acc), num(self.mean_l2), num(self.median_l2), num(self.linf), str(self.n_flagged)]


@dataclass
class ScenarioReport:
    rows: list[ScenarioRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def scenario_rows(self) -> list[ScenarioRow]:
        return [r for r in self.rows if r.scenario in {s.value for s in Scenario}]

    def skipped(self) -> list[ScenarioRow]:
        return [r for r in self.rows if r.skipped is not None]

    def get(self, attack: str, scenario: str | Scenario, axis_value: float) -> ScenarioRow:
        scenario = Scenario(scenario).value
        for r in self.rows:
            if r.attack == attack and r.scenario == scenario and math.isclose(r.axis_value, axis_value):
                return r
        raise KeyError((attack, scenario, axis_value))

    def adv_acc(self, attack: str, scenario: str | Scenario, axis_value: float) -> float:
        return self.get(attack, scenario, axis_value).adv_acc

    def baseline_acc(self) -> float:
        for r in self.rows:
            if r.scenario == "baseline":
                return r.clean_acc
        raise KeyError("report has no baseline row")

    def base_acc(self) -> dict[float, float]:
        """Clean accuracy of each compressed model, keyed by axis value."""
        out: dict[float, float] = {}
        for r in self.rows:
            if r.scenario == Scenario.COMP_TO_COMP.value and r.skipped is None:
                out.setdefault(r.axis_value, r.clean_acc)
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow(r.csv_fields())
        return path

    @classmethod
    def from_csv(cls, path) -> ScenarioReport:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != REPORT_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            rows = []
            for rec in reader:
                d = dict(zip(header, rec))

                def num(key):
                    return float(d[key]) if d[key] not in ("", "skipped") else math.nan

                rows.append(
                    ScenarioRow(
                        d["axis_kind"], float(d["axis_value"]), d["attack"], d["scenario"],
                        num("clean_acc"), num("adv_acc"), num("mean_l2"), num("median_l2"), num("linf"),
                        int(d["n_flagged"] or 0), "skipped" if d["adv_acc"] == "skipped" else None,
                    )
                )
        return cls(rows)


@dataclass
class CompressedModel:
    axis_kind: str  # density | bitwidth
    axis_value: float
    checkpoint: Checkpoint


def _check_compatible(a: Checkpoint, b: Checkpoint) -> None:
    if a.architecture.input_shape != b.architecture.input_shape:
        raise ScenarioError(f"input shapes differ: {a.architecture.input_shape} vs {b.architecture.input_shape}")
    if a.architecture.param_shapes() != b.architecture.param_shapes():
        raise ScenarioError(f"architectures differ: {a.architecture.name} vs {b.architecture.name}")


def _accuracy(ckpt: Checkpoint, images, labels, audit: AuditLog | None, cid: str) -> tuple[float, np.ndarray]:
    if audit is not None:
        audit.record("evaluate", cid)
    correct = predict(ckpt, images) == labels
    return float(correct.mean()) if len(correct) else math.nan, correct


def run_scenario(
    scenario: Scenario | str,
    source: Checkpoint,
    target: Checkpoint,
    attack: AttackConfig,
    dataset: LabeledDataset,
    *,
    axis_kind: str = "",
    axis_value: float = math.nan,
    audit: AuditLog | None = None,
    batch: AdversarialBatch | None = None,
) -> ScenarioRow:
    """Craft adversarial samples on ``source`` and measure ``target``'s accuracy on them.

    A pre-computed ``batch`` crafted on ``source`` may be passed to skip generation.
    """
    scenario = Scenario(scenario)
    _check_compatible(source, target)
    source_id, target_id = source.fingerprint(), target.fingerprint()
    if scenario is Scenario.COMP_TO_COMP and source_id != target_id:
        raise ScenarioError("comp_to_comp needs the same checkpoint as source and target")
    if batch is None:
        batch = generate(source, dataset.images, dataset.labels, attack, audit=audit)
    elif batch.source != source_id:
        raise ScenarioError("supplied adversarial batch was not crafted on the source checkpoint")
    clean, _ = _accuracy(target, dataset.images, dataset.labels, audit, target_id)
    adv, adv_correct = _accuracy(target, batch.adversarial, dataset.labels, audit, target_id)
    return ScenarioRow(
        axis_kind,
        axis_value,
        attack.method,
        scenario.value,
        clean_acc=clean,
        adv_acc=adv,
        mean_l2=float(batch.l2.mean()) if len(batch) else math.nan,
        median_l2=float(np.median(batch.l2)) if len(batch) else math.nan,
        linf=float(batch.linf.max()) if len(batch) else math.nan,
        n_flagged=int(batch.flagged.sum()),
        batch=batch,
        adv_correct=adv_correct,
    )


def sweep(
    baseline: Checkpoint,
    compressed: Sequence[CompressedModel],
    attacks: Sequence[AttackConfig],
    dataset: LabeledDataset,
    *,
    audit: AuditLog | None = None,
    keep_batches: bool = False,
) -> ScenarioReport:
    """Every scenario x attack x compression level, plus one clean baseline row.

    Adversarial batches are generated once per (source model, attack) and
    shared between the scenarios that use them.  A failing cell is recorded
    as skipped and the sweep carries on.
    """
    if not attacks:
        raise ValueError("no attacks configured")
    axis_kind = compressed[0].axis_kind if compressed else "density"
    base_clean, _ = _accuracy(baseline, dataset.images, dataset.labels, audit, baseline.fingerprint())
    baseline_value = 1.0 if axis_kind == "density" else 32.0
    rows = [ScenarioRow(axis_kind, baseline_value, "none", "baseline", base_clean, base_clean)]

    cache: dict[tuple[str, AttackConfig], AdversarialBatch] = {}

    def crafted(src: Checkpoint, cfg: AttackConfig) -> AdversarialBatch:
        key = (src.fingerprint(), cfg)
        if key not in cache:
            cache[key] = generate(src, dataset.images, dataset.labels, cfg, audit=audit)
        return cache[key]

    body = []
    for cfg in attacks:
        for scenario in Scenario:
            for cm in compressed:
                source, target = scenario.roles(baseline, cm.checkpoint)
                try:
                    row = run_scenario(
                        scenario, source, target, cfg, dataset,
                        axis_kind=cm.axis_kind, axis_value=cm.axis_value, audit=audit,
                        batch=crafted(source, cfg),
                    )
                except Exception as exc:  # noqa: BLE001 - recorded as a skipped cell
                    logger.warning("skipping %s/%s at %s=%g: %s", cfg.method, scenario.value, cm.axis_kind, cm.axis_value, exc)
                    row = ScenarioRow(cm.axis_kind, cm.axis_value, cfg.method, scenario.value, skipped=str(exc))
                if not keep_batches:
                    row.batch = None
                body.append(row)
                logger.info("%s %s %s=%g adv_acc=%.4f", cfg.method, scenario.value, cm.axis_kind, cm.axis_value, row.adv_acc)
    order = {s.value: i for i, s in enumerate(Scenario)}
    body.sort(key=lambda r: (r.attack, order[r.scenario], r.axis_value))
    return ScenarioReport(rows + body)


# --------------------------------------------------------------------------
# distributions
# --------------------------------------------------------------------------


def _exact(x) -> str:
    """Shortest decimal that reads back as the same float64 (a float32 value is widened first)."""
    return np.format_float_positional(float(x), trim="-")


@dataclass
class CdfTable:
    values: np.ndarray
    fractions: np.ndarray
    count: int

    def at(self, x: float) -> float:
        """CDF at ``x`` to knot resolution: the fraction of the largest knot <= x."""
        i = np.searchsorted(self.values, x, side="right")
        return 0.0 if i == 0 else float(self.fractions[i - 1])

    @property
    def reaches_one_at(self) -> float:
        return float(self.values[np.argmax(self.fractions >= 1.0)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "cdf"])
            for v, f in zip(self.values, self.fractions):
                w.writerow([_exact(v), _exact(f)])
        return path

    @classmethod
    def from_values(cls, data: np.ndarray, knots: int = CDF_KNOTS) -> CdfTable:
        s = np.sort(np.asarray(data, dtype=np.float64).ravel())
        if not len(s):
            raise ValueError("cannot build a CDF from no values")
        idx = np.round(np.linspace(0, len(s) - 1, knots)).astype(np.int64)
        values = s[idx]
        fractions = np.searchsorted(s, values, side="right") / len(s)
        return cls(values, fractions, len(s))


def ecdf_at(data: np.ndarray, x: float) -> float:
    """Exact empirical CDF of ``data`` at ``x``."""
    data = np.asarray(data).ravel()
    return float(np.count_nonzero(data <= x)) / len(data)


@dataclass
class CdfAnalysis:
    weights: CdfTable
    activations: CdfTable
    weight_values: np.ndarray = field(repr=False)
    activation_values: np.ndarray = field(repr=False)


def cdf(checkpoint: Checkpoint, images: np.ndarray, knots: int = CDF_KNOTS) -> CdfAnalysis:
    """Empirical CDFs of all (effective) weights and of all hidden activations on ``images``."""
    eff = checkpoint.effective_params()
    w = np.concatenate([eff[n].ravel() for n in checkpoint.architecture.weight_names()])
    _, acts = forward(checkpoint, images, record_activations=True)
    a = np.concatenate([x.ravel() for x in acts]) if acts else np.zeros(0, np.float32)
    return CdfAnalysis(CdfTable.from_values(w, knots), CdfTable.from_values(a, knots), w, a)


def preferred_density(report_or_acc, tolerance: float = 0.005) -> float:
    """Smallest swept density from which every denser model keeps the dense accuracy within ``tolerance``.

    Accepts a :class:`ScenarioReport` or a ``{density: accuracy}`` mapping.
    The dense reference is the density-1.0 entry, falling back to the
    report's baseline row.
    """
    if isinstance(report_or_acc, ScenarioReport):
        acc = report_or_acc.base_acc()
        ref = acc.get(1.0)
        if ref is None:
            ref = report_or_acc.baseline_acc()
    else:
        acc = dict(report_or_acc)
        ref = acc.get(1.0)
        if ref is None:
            raise ValueError("no density-1.0 accuracy to compare against")
    if len(acc) < 4:
        raise ValueError(f"sweep too sparse: {len(acc)} densities, need at least 4")
    best = max(acc)
    for d in sorted(acc, reverse=True):
        if acc[d] < ref - tolerance:
            break
        best = d
    return best


def scenario_values(report: ScenarioReport, attack: str, scenario: Scenario | str, axis_values: Iterable[float]) -> list[float]:
    return [report.adv_acc(attack, scenario, v) for v in axis_values]
