import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plugcompat.data import generate_task
from plugcompat.errors import ConfigError
from plugcompat.evalkit import (
    CompatCell,
    CompatReport,
    SweepCurve,
    accuracy,
    compat_experiment,
    default_probes,
    drift_profile,
    fingerprint,
    harmonic_mean,
    layer_feature_change,
    layer_labels,
    ood_eval,
    ood_table_tsv,
    param_change,
    provenance_line,
    read_table,
    shift_average,
    spearman,
)
from plugcompat.rng import Rng
from plugcompat.tuners import TunerHyper, TunerModule, train_tuner


@pytest.mark.parametrize(
    "base,new,h", [(81.27, 79.32, 80.28), (79.94, 75.40, 77.60), (65.51, 70.79, 68.04)]
)
def test_harmonic_mean_fixtures(base, new, h):
    assert abs(harmonic_mean(base, new) - h) <= 0.01


def test_harmonic_mean_edges():
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert harmonic_mean(50.0, 50.0) == 50.0
    with pytest.raises(ConfigError):
        harmonic_mean(-1.0, 5.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_harmonic_mean_bounded_by_min_and_mean(b, n):
    h = harmonic_mean(b, n)
    assert min(b, n) - 1e-9 <= h <= (b + n) / 2 + 1e-9
    assert h == pytest.approx(harmonic_mean(n, b))


def test_param_change_example():
    a, r = param_change([1.0, 2.0], [1.1, 1.8])
    assert a == pytest.approx(0.15, abs=1e-12)
    assert r == pytest.approx(0.10, abs=1e-8)


def test_spearman_edge_cases():
    assert spearman([0, 1, 2, 3], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert spearman([0, 1, 2, 3], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([0, 1, 2], [5, 5, 5]) == 0.0


def test_layer_labels():
    assert layer_labels(2) == ["pre", "0", "1", "post"]


def test_drift_identity_and_symmetry(base_pair, upgraded_pair):
    same = drift_profile(base_pair, base_pair)
    assert all(v == 0.0 for v in same.param_abs.values())
    assert all(v == 0.0 for v in same.feat_abs.values())
    fwd = drift_profile(base_pair, upgraded_pair)
    back = drift_profile(upgraded_pair, base_pair)
    for key in fwd.layers:
        assert fwd.param_abs[key] == pytest.approx(back.param_abs[key], rel=1e-12)
        assert fwd.feat_abs[key] == pytest.approx(back.feat_abs[key], rel=1e-12)
    assert fwd.depths()[0] == -1 and fwd.depths()[-1] == base_pair.text.config.layers


def test_duplicate_probes_leave_means_unchanged(base_pair, upgraded_pair):
    probes = default_probes(base_pair.text.config)[:10]
    once = layer_feature_change(base_pair.text, upgraded_pair.text, probes)
    twice = layer_feature_change(base_pair.text, upgraded_pair.text, np.concatenate([probes, probes]))
    for key in once.layers:
        assert twice.feat_abs[key] == pytest.approx(once.feat_abs[key], rel=1e-12)
        assert twice.feat_rel[key] == pytest.approx(once.feat_rel[key], rel=1e-12)


def test_empty_probe_set_rejected(base_pair):
    with pytest.raises(ConfigError):
        layer_feature_change(base_pair.text, base_pair.text, np.zeros((0, 5), dtype=np.int64))


def test_drift_tsv_has_all_layers(base_pair, upgraded_pair):
    prof = drift_profile(base_pair, upgraded_pair)
    rows = read_table(prof.to_tsv({"seeds": [0]}), delimiter="\t")
    assert [r["layer"] for r in rows] == layer_labels(base_pair.text.config.layers)


def test_upgraded_equal_to_base_gives_new_equal_base(base_pair):
    tasks = [generate_task(0)]
    report = compat_experiment(base_pair, base_pair, tasks, ["zs", "coop"], seeds=(0,), hyper={"coop": {"epochs": 5}})
    for cell in report.cells:
        assert cell.new == cell.base


def test_random_classifier_near_chance(base_pair):
    task = generate_task(5, M=512)
    C = len(task.class_tokens)
    weight = Rng(11).normals((C, base_pair.text.config.feat_dim))
    module = TunerModule("lp", {"weight": weight}, {}, TunerHyper(), [list(t) for t in task.class_tokens])
    assert abs(accuracy(base_pair, module, task.test) - 100.0 / C) <= 5.0


def test_compat_report_csv_schema():
    cells = [
        CompatCell(0, "coop", 0, 80.0, 70.0),
        CompatCell(0, "coop", 1, 82.0, 72.0),
        CompatCell(1, "coop", 0, 90.0, 60.0),
    ]
    report = CompatReport(cells, [0, 1], {"seeds": [0, 1]})
    text = report.to_csv()
    assert text.startswith(provenance_line({"seeds": [0, 1]}))
    rows = read_table(text)
    assert list(rows[0]) == ["task", "method", "seed", "base", "new", "h"]
    assert rows[0]["h"] == f"{harmonic_mean(80.0, 70.0):.2f}"
    assert report.mean("coop", task=0)["base"] == pytest.approx(81.0)
    assert report.mean("coop")["new"] == pytest.approx(np.mean([71.0, 60.0]))


def test_fingerprint_is_order_independent():
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})


def test_sweep_curve_statistics():
    curve = SweepCurve([0, 1, 2], {0: [1, 2, 3]}, {0: [9.0, 8.0, 7.0], 1: [1.0, 3.0, 2.0]})
    assert curve.mean("new") == [5.0, 5.5, 4.5]
    rho = curve.spearman_new()
    assert rho[0] == pytest.approx(-1.0) and rho[1] == pytest.approx(0.5)


def test_ood_eval_on_zero_shot(base_pair):
    task = generate_task(0).with_shifts()
    zs = train_tuner("zs", base_pair, task)
    table = ood_eval(base_pair, zs, task)
    assert set(table) == {"source", *task.shifted_tests}
    assert shift_average(table) < table["source"]
    rows = read_table(ood_table_tsv({"zs": table}), delimiter="\t")
    assert rows[0]["method"] == "zs"
    with pytest.raises(ConfigError):
        ood_eval(base_pair, zs, generate_task(0))


def test_accuracy_rejects_empty_split(base_pair, task0):
    zs = train_tuner("zs", base_pair, task0)
    empty = type(task0.test)(task0.test.x[:0], task0.test.y[:0])
    with pytest.raises(ConfigError):
        accuracy(base_pair, zs, empty)


def test_compat_experiment_records_failures(base_pair):
    tasks = [generate_task(0)]
    report = compat_experiment(base_pair, base_pair, tasks, ["zs", "coop"], seeds=(0,), hyper={"coop": {"depth": 99}})
    failed = [c for c in report.cells if c.error is not None]
    assert [c.method for c in failed] == ["coop"] and "ConfigError" in failed[0].error
    assert np.isnan(failed[0].h)
    assert report.mean("zs")["base"] == report.cells[0].base
