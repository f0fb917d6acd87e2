import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferlab.attacks import AttackConfig, AuditLog, generate
from transferlab.compression import FixedPointFormat, PruneConfig, prune_one_shot, quantise_model
from transferlab.model import init_checkpoint, parse_architecture
from transferlab.trainer import TrainConfig, train
from transferlab.transfer import (
    REPORT_HEADER,
    CdfTable,
    CompressedModel,
    Scenario,
    ScenarioError,
    ScenarioReport,
    cdf,
    ecdf_at,
    preferred_density,
    run_scenario,
    sweep,
)

from test_trainer import TINY, toy_data

ATTACKS = [AttackConfig("ifgsm", 0.05, 3), AttackConfig("fgsm", 0.1), AttackConfig.table1("deepfool")]


@pytest.fixture(scope="module")
def models():
    ds = toy_data(200)
    cfg = TrainConfig(epochs=3, decay_points=(2,), batch_size=16, base_lr=0.05)
    base = train(init_checkpoint(TINY, seed=3), ds, cfg).checkpoint
    ft = TrainConfig(epochs=1, decay_points=(), batch_size=16, base_lr=0.01)
    pruned = {d: prune_one_shot(base, PruneConfig(d, "one_shot", fine_tune=ft), ds) for d in (1.0, 0.5, 0.1)}
    return base, pruned, toy_data(40, seed=9)


def test_scenario_roles():
    assert Scenario.COMP_TO_COMP.roles("B", "C") == ("C", "C")
    assert Scenario.FULL_TO_COMP.roles("B", "C") == ("B", "C")
    assert Scenario.COMP_TO_FULL.roles("B", "C") == ("C", "B")
    assert [s.number for s in Scenario] == [1, 2, 3]


def test_identity_compression_equals_self_attack(models):
    base, pruned, ds = models
    cfg = ATTACKS[0]
    row = run_scenario("comp_to_comp", pruned[1.0], pruned[1.0], cfg, ds)
    direct = generate(base, ds.images, ds.labels, cfg)
    np.testing.assert_array_equal(row.batch.adversarial, direct.adversarial)
    self_row = run_scenario("comp_to_comp", base, base, cfg, ds)
    assert (row.clean_acc, row.adv_acc) == (self_row.clean_acc, self_row.adv_acc)


def test_zero_epsilon_gives_clean_accuracy(models):
    base, pruned, ds = models
    for scenario in Scenario:
        src, tgt = scenario.roles(base, pruned[0.5])
        row = run_scenario(scenario, src, tgt, AttackConfig("ifgsm", 0.0, 4), ds)
        assert row.adv_acc == row.clean_acc


def test_comp_to_comp_needs_one_checkpoint(models):
    base, pruned, ds = models
    with pytest.raises(ScenarioError):
        run_scenario("comp_to_comp", base, pruned[0.5], ATTACKS[1], ds)


def test_architecture_mismatch(models):
    base, _, ds = models
    other = init_checkpoint(parse_architecture("name other\ninput 1 8 8\nflatten\ndense 10\n"))
    with pytest.raises(ScenarioError, match="architectures differ"):
        run_scenario("full_to_comp", base, other, ATTACKS[1], ds)
    wide = init_checkpoint(parse_architecture("name wide\ninput 1 9 9\nflatten\ndense 10\n"))
    with pytest.raises(ScenarioError, match="input shapes"):
        run_scenario("full_to_comp", base, wide, ATTACKS[1], ds)


def test_comp_to_comp_symmetric_in_argument_slot(models):
    _, pruned, ds = models
    c = pruned[0.5]
    a = run_scenario(Scenario.COMP_TO_COMP, c, c, ATTACKS[0], ds)
    b = run_scenario(Scenario.COMP_TO_COMP, source=c, target=c, attack=ATTACKS[0], dataset=ds)
    assert (a.clean_acc, a.adv_acc, a.mean_l2) == (b.clean_acc, b.adv_acc, b.mean_l2)


def test_gradients_only_from_source(models):
    base, pruned, ds = models
    audit = AuditLog()
    run_scenario("full_to_comp", base, pruned[0.1], ATTACKS[0], ds, audit=audit)
    assert audit.touched("gradient") == {base.fingerprint()}
    assert audit.touched("evaluate") == {pruned[0.1].fingerprint()}


def test_single_model_single_attack_counts(models):
    base, pruned, ds = models
    report = sweep(base, [CompressedModel("density", 0.5, pruned[0.5])], ATTACKS[:1], ds)
    assert len(report) == 4
    assert len(report.scenario_rows()) == 3
    assert report.rows[0].scenario == "baseline"


def test_full_grid_counts_and_order(models, tmp_path):
    base, pruned, ds = models
    cms = [CompressedModel("density", d, pruned[d]) for d in (1.0, 0.5, 0.1)]
    report = sweep(base, cms, ATTACKS, ds)
    rows = report.scenario_rows()
    assert len(rows) == 27
    order = {s.value: i for i, s in enumerate(Scenario)}
    keys = [(r.attack, order[r.scenario], r.axis_value) for r in rows]
    assert keys == sorted(keys)
    for attack in ("ifgsm", "fgsm", "deepfool"):
        values = {report.adv_acc(attack, s, 1.0) for s in Scenario}
        assert max(values) - min(values) <= 0.002  # identity compression
    path = report.to_csv(tmp_path / "r.csv")
    with open(path) as fh:
        assert next(csv.reader(fh)) == REPORT_HEADER
    back = ScenarioReport.from_csv(path)
    assert len(back) == len(report)
    assert back.adv_acc("fgsm", "comp_to_full", 0.1) == pytest.approx(report.adv_acc("fgsm", "comp_to_full", 0.1), abs=1e-6)
    assert back.base_acc() == pytest.approx(report.base_acc(), abs=1e-6)


def test_failing_cell_is_skipped_not_fatal(models, tmp_path):
    base, pruned, ds = models
    other = init_checkpoint(parse_architecture("name other\ninput 1 8 8\nflatten\ndense 10\n"))
    cms = [CompressedModel("density", 0.5, pruned[0.5]), CompressedModel("density", 0.3, other)]
    report = sweep(base, cms, ATTACKS[1:2], ds)
    assert len(report.scenario_rows()) == 6
    skipped = report.skipped()
    assert {r.axis_value for r in skipped} == {0.3}
    assert len(skipped) == 2  # comp_to_comp works on a lone model, the cross scenarios do not
    text = report.to_csv(tmp_path / "s.csv").read_text()
    assert ",skipped," in text
    assert len(ScenarioReport.from_csv(tmp_path / "s.csv").skipped()) == 2


def test_sweep_rejects_empty_attacks(models):
    base, pruned, ds = models
    with pytest.raises(ValueError, match="no attacks configured"):
        sweep(base, [CompressedModel("density", 0.5, pruned[0.5])], [], ds)


def test_bitwidth_sweep_baseline_row(models):
    base, _, ds = models
    fmt = FixedPointFormat.for_bitwidth(8)
    q = quantise_model(base, fmt, fmt)
    report = sweep(base, [CompressedModel("bitwidth", 8, q)], ATTACKS[1:2], ds)
    assert (report.rows[0].axis_kind, report.rows[0].axis_value) == ("bitwidth", 32.0)


def test_cdf_of_all_zero_weights_jumps_at_zero():
    t = CdfTable.from_values(np.zeros(1000))
    assert t.at(-1e-9) == 0.0 and t.at(0.0) == 1.0
    assert t.reaches_one_at == 0.0


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=2000), st.integers(2, 600))
def test_cdf_monotone_and_normalised(data, knots):
    t = CdfTable.from_values(np.array(data), knots)
    assert len(t.values) == knots
    assert (np.diff(t.values) >= 0).all() and (np.diff(t.fractions) >= 0).all()
    assert t.fractions[-1] == 1.0 and t.values[-1] == max(data)
    for v, f in zip(t.values[::37], t.fractions[::37]):
        assert f == ecdf_at(np.array(data), v)


def test_cdf_csv(tmp_path):
    path = CdfTable.from_values(np.arange(10.0), 5).to_csv(tmp_path / "c.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "value,cdf" and len(lines) == 6 and lines[-1] == "9,1"


def test_model_cdf_saturates_at_format_max(models):
    base, _, ds = models
    fmt = FixedPointFormat.for_bitwidth(4)
    q = quantise_model(base, fmt, fmt)
    analysis = cdf(q, ds.images[:10])
    assert analysis.weights.reaches_one_at <= fmt.max_value
    assert analysis.activations.reaches_one_at <= fmt.max_value
    assert len(analysis.weights.values) == 512


def test_preferred_density_examples():
    flat = {1.0: 0.99, 0.5: 0.99, 0.3: 0.99, 0.1: 0.99}
    assert preferred_density(flat) == 0.1
    drop_last = {1.0: 0.99, 0.5: 0.99, 0.3: 0.988, 0.1: 0.90}
    assert preferred_density(drop_last) == 0.3
    dip = {1.0: 0.99, 0.5: 0.97, 0.3: 0.99, 0.1: 0.99}  # a dip blocks everything below it
    assert preferred_density(dip) == 1.0


def test_preferred_density_too_sparse():
    with pytest.raises(ValueError, match="sparse"):
        preferred_density({1.0: 0.99, 0.5: 0.99, 0.1: 0.99})


@settings(max_examples=100)
@given(st.lists(st.floats(0.9, 1.0), min_size=3, max_size=8))
def test_preferred_density_definition(accs):
    densities = [1.0] + [round(0.9 ** (i + 1), 4) for i in range(len(accs))]
    acc = dict(zip(densities, [0.95] + accs))
    d = preferred_density(acc)
    assert all(acc[x] >= 0.95 - 0.005 for x in densities if x >= d)
    lower = [x for x in densities if x < d]
    if lower:
        assert acc[max(lower)] < 0.95 - 0.005


def test_report_nan_free_for_completed_cells(models):
    base, pruned, ds = models
    report = sweep(base, [CompressedModel("density", 0.1, pruned[0.1])], ATTACKS, ds)
    for r in report.scenario_rows():
        assert not math.isnan(r.adv_acc) and not math.isnan(r.median_l2)


def test_cdf_csv_round_trips_format_maxima(tmp_path):
    tops = np.float32([0.875, 1.984375, 7.999755859375, np.nextafter(np.float32(8), np.float32(0))])
    path = CdfTable.from_values(tops, 4).to_csv(tmp_path / "m.csv")
    back = np.loadtxt(path, delimiter=",", skiprows=1)[:, 0]
    np.testing.assert_array_equal(back, tops.astype(np.float64))
