"""End-to-end acceptance checks on the full MNIST experiment.

Each criterion prints one PASS/FAIL line in the terminal summary.
"""

import time

import numpy as np
import pytest

import conftest
from gradcheck import check_net, random_net
from transferlab.attacks import AttackConfig, generate
from transferlab.compression import PruneConfig, density, on_grid, prune_one_shot, quantise_array
from transferlab.fixedpoint import FixedPointFormat
from transferlab.model import load, predict
from transferlab.trainer import evaluate
from transferlab.transfer import Scenario, ScenarioReport, cdf, ecdf_at

S1, S2, S3 = (s.value for s in Scenario)
SLACK = 1e-9  # accuracies come back from CSV as decimals: 0.989 - 0.987 must count as 0.002


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {name}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def prune_report(experiment) -> ScenarioReport:
    return ScenarioReport.from_csv(experiment.reports / "prune_sweep.csv")


@pytest.fixture(scope="session")
def quant_report(experiment) -> ScenarioReport:
    return ScenarioReport.from_csv(experiment.reports / "quant_sweep.csv")


def test_criterion_01_baseline_accuracy(experiment):
    acc = evaluate(experiment.baseline(), experiment.test_set)
    log = experiment.logs / "train_baseline.csv"
    epochs = len(log.read_text().splitlines()) - 1 if log.exists() else "?"
    record(1, "baseline accuracy", acc >= 0.98, f"test accuracy {acc:.4f} after {epochs} epochs (>= 0.98)")


def test_criterion_02_gradient_oracle():
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net, x = random_net(rng)
        err, n, _ = check_net(net, x, rng)
        worst, checked = max(worst, err), checked + n
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and checked > 0 and elapsed <= 120
    record(2, "gradient oracle", ok, f"100 nets, {checked} probes, worst rel err {worst:.2e}, {elapsed:.1f}s")


def _brute_force(xs: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    grid = fmt.grid()
    codes = np.arange(fmt.k_min, fmt.k_max + 1)
    out = np.empty_like(xs)
    for lo in range(0, len(xs), 5000):
        dist = np.abs(xs[lo : lo + 5000, None] - grid[None, :])
        best = dist == dist.min(axis=1, keepdims=True)
        # among equidistant grid points prefer the even code
        pick = np.where(best & (codes % 2 == 0), 2, best.astype(int)).argmax(axis=1)
        out[lo : lo + 5000] = grid[pick]
    return out


def _random_reals(fmt: FixedPointFormat, rng: np.random.Generator, n: int = 100_000) -> np.ndarray:
    span = 2 * fmt.max_value
    ties = (rng.integers(fmt.k_min, fmt.k_max, n // 10) + 0.5) * fmt.step
    return np.concatenate([
        rng.uniform(-span, span, n - 2 * (n // 10)),
        rng.normal(0, fmt.step * 4, n // 10),
        ties,
    ])


def test_criterion_03_quantiser_properties():
    failures = []
    for n, i in [(4, 1), (8, 2), (16, 4), (32, 4)]:
        fmt = FixedPointFormat(n, i)
        xs = _random_reals(fmt, np.random.default_rng(n))
        q = quantise_array(xs, fmt)
        checks = {
            "idempotence": np.array_equal(quantise_array(q, fmt), q),
            "monotonicity": bool((np.diff(quantise_array(np.sort(xs), fmt)) >= 0).all()),
            "grid": bool(on_grid(q, fmt).all()),
            "saturation": bool((q >= fmt.min_value).all() and (q <= fmt.max_value).all()
                               and (q[xs >= fmt.max_value] == fmt.max_value).all()
                               and (q[xs <= fmt.min_value] == fmt.min_value).all()),
        }
        if n <= 8:
            checks["oracle"] = np.array_equal(q, _brute_force(xs, fmt))
        failures += [f"{fmt}:{k}" for k, ok in checks.items() if not ok]
    record(3, "quantiser properties", not failures, "1e5 reals x 4 formats, oracle for n=4,8" + (f"; failed {failures}" if failures else ""))


def _ordering_holds(source: dict, pruned) -> bool:
    for name, mask in pruned.masks.items():
        mag = np.abs(source[name])
        if (mask == 0).any() and mag[mask == 1].min() < mag[mask == 0].max():
            return False
    return True


def test_criterion_04_pruning_invariants(experiment):
    base = experiment.baseline()
    subset = experiment.train_set.subset(slice(0, 6000))
    ft = experiment.config.prune.fine_tune.build(experiment.config.seed)
    details, ok = [], True
    for target in (0.5, 0.1, 0.02):
        dns = load(experiment.prune_path(target))
        one = prune_one_shot(base, PruneConfig(target, "one_shot", fine_tune=ft), subset)
        for label, ckpt in (("dns", dns), ("one_shot", one)):
            d = density(ckpt)
            zeros = all(not ckpt.params[n][m == 0].any() for n, m in ckpt.masks.items())
            ok &= abs(d - target) <= 0.001 and zeros
            details.append(f"{label}@{target}={d:.4f}")
        ok &= _ordering_holds(base.params, one)
    record(4, "pruning invariants", bool(ok), ", ".join(details) + f", {ft.epochs} fine-tune epochs")


def test_criterion_05_ifgsm_potency(experiment):
    ds = experiment.attack_set
    batch = generate(experiment.baseline(), ds.images, ds.labels, AttackConfig.table1("ifgsm"))
    acc = float((predict(experiment.baseline(), batch.adversarial) == ds.labels).mean())
    record(5, "IFGSM potency", acc < 0.2, f"adversarial accuracy {acc:.4f} on {len(ds)} images (< 0.20)")


def _per_attack(worst: dict) -> str:
    return " ".join(f"{m} {v:.3f}" for m, v in worst.items())


def test_criterion_06_pruning_trends(experiment, prune_report):
    r = prune_report
    gaps = {a.method: max(abs(r.adv_acc(a.method, S2, d) - r.adv_acc(a.method, S1, d)) for d in (1.0, 0.9, 0.7, 0.5))
            for a in experiment.config.attack_configs()}
    gain = r.adv_acc("ifgsm", S3, 0.02) - r.adv_acc("ifgsm", S3, 0.5)
    dense = float(experiment.baseline().metadata["test_accuracy"])
    base_drop = max(dense - float(load(experiment.prune_path(d)).metadata["test_accuracy"]) for d in (1.0, 0.9, 0.7, 0.5, 0.3))
    parts = {"a": max(gaps.values()) <= 0.10 + SLACK, "b": gain >= 0.10 - SLACK, "c": base_drop <= 0.01 + SLACK}
    record(6, "pruning trends", all(parts.values()),
           f"(a) max s2-s1 gap per attack [{_per_attack(gaps)}], (b) s3 gain {gain:+.3f}, (c) worst base drop {base_drop:.4f}"
           + ("" if all(parts.values()) else f"; failed {[k for k, v in parts.items() if not v]}"))


def test_criterion_07_quantisation_trends(experiment, quant_report):
    r = quant_report
    spreads = {}
    for a in experiment.config.attack_configs():
        per_scenario = [[r.adv_acc(a.method, s, b) for b in (8, 16, 32)] for s in Scenario]
        spreads[a.method] = max(max(v) - min(v) for v in per_scenario)
    lifts = {s: r.adv_acc("ifgsm", s, 4) - r.adv_acc("ifgsm", s, 32) for s in (S2, S3)}
    parts = {"a": max(spreads.values()) <= 0.05 + SLACK, "b": all(v > 0 for v in lifts.values())}
    record(7, "quantisation trends", all(parts.values()),
           f"(a) max spread over 8/16/32 bits per attack [{_per_attack(spreads)}], (b) 4-bit lift s2 {lifts[S2]:+.3f} s3 {lifts[S3]:+.3f}"
           + ("" if all(parts.values()) else f"; failed {[k for k, v in parts.items() if not v]}"))


def _median_success_l2(base, ds, cfg: AttackConfig) -> float:
    clean = predict(base, ds.images) == ds.labels
    batch = generate(base, ds.images, ds.labels, cfg)
    success = clean & (predict(base, batch.adversarial) != ds.labels)
    return float(np.median(batch.l2[success])) if success.any() else float("nan")


def test_criterion_08_deepfool_precision(experiment):
    base, ds = experiment.baseline(), experiment.attack_set
    df = _median_success_l2(base, ds, AttackConfig.table1("deepfool"))
    fg = _median_success_l2(base, ds, AttackConfig.table1("ifgsm"))
    record(8, "DeepFool precision", df < fg, f"median L2 deepfool {df:.3f} < ifgsm {fg:.3f}")


def test_criterion_09_cdf_shapes(experiment):
    images = experiment.cdf_images()
    analyses = {b: cdf(load(experiment.quant_path(b)), images) for b in (4, 8, 16, 32)}
    at_zero = {b: ecdf_at(a.weight_values, 0.0) for b, a in analyses.items()}
    top4 = analyses[4].weights.reaches_one_at
    saturated = {b: a.activations.reaches_one_at <= experiment.config.quantise.format(b).max_value
                 for b, a in analyses.items()}
    ok = top4 <= 0.875 and at_zero[4] > at_zero[8] and at_zero[4] > at_zero[16] and all(saturated.values())
    act_tops = ", ".join(f"{b}b {a.activations.reaches_one_at:.3f}" for b, a in analyses.items())
    record(9, "CDF shapes", ok,
           f"4-bit weights reach 1 at {top4:.3f}; F(0) 4b {at_zero[4]:.3f} 8b {at_zero[8]:.3f} 16b {at_zero[16]:.3f}; activation tops {act_tops}")


def test_criterion_10_identity_consistency(experiment, prune_report, quant_report):
    spreads = {}
    for a in experiment.config.attack_configs():
        for label, r, v in (("d1.0", prune_report, 1.0), ("b32", quant_report, 32)):
            values = [r.adv_acc(a.method, s, v) for s in Scenario]
            spreads[f"{a.method}@{label}"] = max(values) - min(values)
    worst = max(spreads, key=spreads.get)
    record(10, "identity consistency", spreads[worst] <= 0.002 + SLACK, f"worst spread {spreads[worst]:.4f} ({worst}), limit 0.002")
