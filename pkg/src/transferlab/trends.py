"""Directional checks over sweep reports, rendered as a plain-text pass/fail summary."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .transfer import CdfTable, Scenario, ScenarioReport, preferred_density

__all__ = ["TrendCheck", "AttackStats", "check_trends", "render_summary"]

S1, S2, S3 = (s.value for s in Scenario)


@dataclass
class TrendCheck:
    name: str
    status: str  # pass | fail | skip | info
    detail: str

    @property
    def failed(self) -> bool:
        return self.status == "fail"


@dataclass
class AttackStats:
    """Perturbation sizes of an attack's successful samples on the baseline."""

    attack: str
    n: int
    n_success: int
    median_l2_success: float


def _check(name: str, ok: bool, detail: str) -> TrendCheck:
    return TrendCheck(name, "pass" if ok else "fail", detail)


def _guard(name: str, fn) -> TrendCheck:
    try:
        return fn()
    except (KeyError, ValueError) as exc:
        return TrendCheck(name, "skip", f"missing data: {exc}")


SLACK = 1e-9  # accuracies are read back as decimals; keeps 0.989 - 0.987 within 0.002


def _at_most(x: float, limit: float) -> bool:
    return x <= limit + SLACK


def _acc(report: ScenarioReport, attack: str, scenario: str, value: float) -> float:
    v = report.adv_acc(attack, scenario, value)
    if math.isnan(v):
        raise KeyError((attack, scenario, value))
    return v


def check_trends(
    prune_report: ScenarioReport | None = None,
    quant_report: ScenarioReport | None = None,
    *,
    baseline_accuracy: float | None = None,
    attack_stats: Mapping[str, AttackStats] | None = None,
    weight_cdfs: Mapping[int, CdfTable] | None = None,
    activation_cdfs: Mapping[int, CdfTable] | None = None,
    activation_max: Mapping[int, float] | None = None,
    attack: str = "ifgsm",
) -> list[TrendCheck]:
    checks: list[TrendCheck] = []
    if baseline_accuracy is not None:
        checks.append(_check("baseline_accuracy", baseline_accuracy >= 0.98, f"test accuracy {baseline_accuracy:.4f} (need >= 0.98)"))

    if prune_report is not None:
        pr = prune_report
        densities = sorted(pr.base_acc())

        def potency():
            v = _acc(pr, attack, S1, 1.0)
            return _check("attack_potency", v < 0.20, f"{attack} {S1} at density 1.0: adv acc {v:.4f} (need < 0.20)")

        def dense_transfer():
            gaps = {d: abs(_acc(pr, attack, S2, d) - _acc(pr, attack, S1, d)) for d in densities if d >= 0.5}
            if not gaps:
                raise ValueError("no densities >= 0.5")
            worst = max(gaps, key=gaps.get)
            return _check("prune_transfer_dense", _at_most(gaps[worst], 0.10), f"max |{S2}-{S1}| at d>=0.5 is {gaps[worst]:.4f} at d={worst:g} (need <= 0.10)")

        def sparse_transfer():
            lo, hi = _acc(pr, attack, S3, 0.02), _acc(pr, attack, S3, 0.5)
            return _check("prune_transfer_sparse", _at_most(0.10, lo - hi), f"{S3} adv acc d=0.02 {lo:.4f} vs d=0.5 {hi:.4f} (need gap >= 0.10)")

        def plateau():
            acc = pr.base_acc()
            ref = acc.get(1.0, None)
            if ref is None:
                ref = pr.baseline_acc()
            gaps = {d: ref - a for d, a in acc.items() if d >= 0.3}
            worst = max(gaps, key=lambda d: abs(gaps[d]))
            return _check("prune_base_acc_plateau", all(_at_most(abs(g), 0.01) for g in gaps.values()), f"largest BASE ACC change at d>=0.3 is {gaps[worst]:+.4f} at d={worst:g} (need within 0.01)")

        def knee():
            return TrendCheck("preferred_density", "info", f"{preferred_density(pr):g}")

        def consistency():
            parts, ok = [], True
            for a in sorted({r.attack for r in pr.scenario_rows()}):
                vals = [_acc(pr, a, s, 1.0) for s in (S1, S2, S3)]
                ok &= _at_most(max(vals) - min(vals), 0.002)
                parts.append(f"{a} spread {max(vals) - min(vals):.4f}")
            return _check("scenario_consistency_density_1", ok, "; ".join(parts) + " (need <= 0.002)")

        for name, fn in [
            ("attack_potency", potency),
            ("prune_transfer_dense", dense_transfer),
            ("prune_transfer_sparse", sparse_transfer),
            ("prune_base_acc_plateau", plateau),
            ("preferred_density", knee),
            ("scenario_consistency_density_1", consistency),
        ]:
            checks.append(_guard(name, fn))

    if quant_report is not None:
        qr = quant_report

        def flat():
            parts, ok = [], True
            for s in (S1, S2, S3):
                vals = [_acc(qr, attack, s, b) for b in (8, 16, 32)]
                ok &= _at_most(max(vals) - min(vals), 0.05)
                parts.append(f"{s} range {max(vals) - min(vals):.4f}")
            return _check("quant_transfer_flat", ok, "; ".join(parts) + " over bitwidths 8/16/32 (need <= 0.05)")

        def clip_protection():
            parts, ok = [], True
            for s in (S2, S3):
                a4, a32 = _acc(qr, attack, s, 4), _acc(qr, attack, s, 32)
                ok &= a4 > a32
                parts.append(f"{s} b4 {a4:.4f} vs b32 {a32:.4f}")
            return _check("quant_clip_protection", ok, "; ".join(parts) + " (need b4 > b32)")

        def consistency():
            parts, ok = [], True
            for a in sorted({r.attack for r in qr.scenario_rows()}):
                vals = [_acc(qr, a, s, 32) for s in (S1, S2, S3)]
                ok &= _at_most(max(vals) - min(vals), 0.002)
                parts.append(f"{a} spread {max(vals) - min(vals):.4f}")
            return _check("scenario_consistency_bitwidth_32", ok, "; ".join(parts) + " (need <= 0.002)")

        for name, fn in [
            ("quant_transfer_flat", flat),
            ("quant_clip_protection", clip_protection),
            ("scenario_consistency_bitwidth_32", consistency),
        ]:
            checks.append(_guard(name, fn))

    if attack_stats:
        def precision():
            df, ig = attack_stats["deepfool"], attack_stats["ifgsm"]
            ok = df.median_l2_success < ig.median_l2_success
            return _check("deepfool_precision", ok, f"median L2 of successful samples: deepfool {df.median_l2_success:.4f} vs ifgsm {ig.median_l2_success:.4f}")

        checks.append(_guard("deepfool_precision", precision))

    if weight_cdfs:
        def weights():
            w4 = weight_cdfs[4]
            top = w4.reaches_one_at
            f4 = w4.at(0.0)
            others = {b: weight_cdfs[b].at(0.0) for b in (8, 16) if b in weight_cdfs}
            if not others:
                raise KeyError("8- or 16-bit weight CDF")
            ok = top <= 0.875 and all(f4 > f for f in others.values())
            rest = ", ".join(f"F{b}(0)={f:.4f}" for b, f in others.items())
            return _check("cdf_weights_4bit", ok, f"4-bit CDF reaches 1 at {top:.4f}; F4(0)={f4:.4f}, {rest}")

        checks.append(_guard("cdf_weights_4bit", weights))

    if activation_cdfs and activation_max:
        def saturation():
            parts, ok = [], True
            for b, table in sorted(activation_cdfs.items()):
                top, limit = table.reaches_one_at, activation_max[b]
                ok &= top <= limit
                pinned = " (at the limit)" if top == limit else ""
                parts.append(f"b{b} max {top:.6g} / {limit:.6g}{pinned}")
            return _check("cdf_activation_saturation", ok, "; ".join(parts))

        checks.append(_guard("cdf_activation_saturation", saturation))
    return checks


def render_summary(checks: Sequence[TrendCheck]) -> str:
    width = max((len(c.name) for c in checks), default=0)
    lines = [f"{c.status.upper():5} {c.name:<{width}}  {c.detail}" for c in checks]
    failed = sum(c.failed for c in checks)
    lines.append(f"{len(checks)} checks, {failed} failed")
    return "\n".join(lines) + "\n"
