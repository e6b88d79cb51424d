import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from moma.evaluation import (BootstrapConfig, Estimate, EvalInput, RedrawBudgetExhausted, binarize_race,
                             bootstrap_ci, format_cell, paired_t_test, render_report, render_table, replicate_rng,
                             results_table, subgroup_report, write_report)
from moma.metrics import UndefinedMetricError, auroc, macro_f1


def binary_inputs(n, seed=0, sex=None, race=None):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    s = 0.3 * y + rng.uniform(0, 0.7, n)  # overlapping classes
    return EvalInput(y, (s > 0.5).astype(int), 2, s, sex, race)


# -- bootstrap ------------------------------------------------------------------------

def test_bootstrap_is_deterministic():
    e = binary_inputs(60)
    cfg = BootstrapConfig(replicates=200, seed=3)
    a, b = bootstrap_ci(e, "auroc", cfg), bootstrap_ci(e, "auroc", cfg)
    assert np.array_equal(a.values, b.values) and (a.lo, a.hi) == (b.lo, b.hi)


def test_parallel_matches_serial():
    e = binary_inputs(60)
    serial = bootstrap_ci(e, "aupr", BootstrapConfig(replicates=200, seed=1))
    parallel = bootstrap_ci(e, "aupr", BootstrapConfig(replicates=200, seed=1, workers=4))
    assert np.array_equal(serial.values, parallel.values)


def brute_bootstrap(y, s, seed, B, metric):
    """Independent resampler over the same (seed, replicate, attempt) streams."""
    vals, redraws = [], 0
    for r in range(B):
        attempt = 0
        while True:
            idx = np.random.default_rng([seed, r, attempt]).integers(0, len(y), size=len(y))
            yy = [y[i] for i in idx]
            if 0 < sum(yy) < len(yy):
                vals.append(metric(yy, [s[i] for i in idx]))
                break
            attempt += 1
            redraws += 1
    return np.array(vals), redraws


def test_bootstrap_matches_brute_force_resampler():
    y = [0, 0, 0, 0, 0, 1, 0, 1]  # two positives in eight: many resamples miss them
    s = [0.1, 0.3, 0.2, 0.6, 0.4, 0.7, 0.5, 0.9]
    e = EvalInput(y, [0] * 8, 2, s)
    res = bootstrap_ci(e, "auroc", BootstrapConfig(replicates=300, seed=9))
    vals, redraws = brute_bootstrap(y, s, 9, 300, auroc)
    assert np.max(np.abs(res.values - vals)) <= 1e-15
    assert res.redraws == redraws > 0
    lo, hi = np.quantile(vals, [0.025, 0.975])
    assert (res.lo, res.hi) == (lo, hi)


def test_replicate_stream_is_counter_based():
    a = replicate_rng(1, 5, 0).integers(0, 100, 10)
    _ = replicate_rng(1, 4, 0).integers(0, 100, 10)
    assert np.array_equal(a, replicate_rng(1, 5, 0).integers(0, 100, 10))
    assert not np.array_equal(a, replicate_rng(1, 5, 1).integers(0, 100, 10))


def test_perfect_classifier_interval():
    y = np.array([0, 1] * 20)
    e = EvalInput(y, y, 2, y * 0.8 + 0.1)
    for metric in ("auroc", "aupr", "f1"):
        r = bootstrap_ci(e, metric, BootstrapConfig(replicates=100))
        assert (r.point, r.lo, r.hi) == (1.0, 1.0, 1.0)


def test_redraw_budget():
    e = EvalInput([0] * 99 + [1], [0] * 100, 2, np.linspace(0, 1, 100))
    with pytest.raises(RedrawBudgetExhausted):
        bootstrap_ci(e, "auroc", BootstrapConfig(replicates=50, max_redraws=0))


def test_undefined_point_estimate_raises():
    with pytest.raises(UndefinedMetricError):
        bootstrap_ci(EvalInput([1, 1], [1, 1], 2, [0.2, 0.9]), "auroc", BootstrapConfig(replicates=10))


def test_interval_narrows_with_more_data():
    widths = {100: [], 1000: []}
    for seed in range(20):
        for n in widths:
            r = bootstrap_ci(binary_inputs(n, seed), "auroc", BootstrapConfig(replicates=200, seed=seed))
            widths[n].append(r.hi - r.lo)
    assert np.median(widths[1000]) < np.median(widths[100])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_interval_brackets_point_for_macro_f1(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, 40)
    p = np.where(rng.uniform(size=40) < 0.7, y, rng.integers(0, 3, 40))
    r = bootstrap_ci(EvalInput(y, p, 3), "macro_f1", BootstrapConfig(replicates=100, seed=seed))
    assert r.lo <= r.hi and 0 <= r.lo and r.hi <= 1
    assert r.point == pytest.approx(macro_f1(y, p, 3))


def test_config_validation():
    with pytest.raises(ValueError):
        BootstrapConfig(replicates=0)
    with pytest.raises(ValueError):
        BootstrapConfig(ci_level=1.0)
    with pytest.raises(KeyError):
        bootstrap_ci(binary_inputs(10), "brier")


def test_eval_input_validation():
    with pytest.raises(ValueError):
        EvalInput([0, 1], [0], 2)
    with pytest.raises(ValueError):
        EvalInput([0, 1], [0, 1], 2, [0.2, 1.5])
    with pytest.raises(ValueError):
        EvalInput([0, 1], [0, 1], 2, sex=("female",))


# -- paired t-test --------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 50))
def test_t_test_matches_reference(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(0.1, size=n)
    d = a - b
    t_ref = d.mean() / (math.sqrt(sum((x - d.mean()) ** 2 for x in d) / (n - 1)) / math.sqrt(n))
    t, p = paired_t_test(a, b)
    assert t == pytest.approx(t_ref, rel=1e-10)
    ref = stats.ttest_rel(a, b)
    assert p == pytest.approx(ref.pvalue, rel=1e-10)


def test_t_test_degenerate_cases():
    assert paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == (0.0, 1.0)
    assert paired_t_test([0.5], [0.1]) == (0.0, 1.0)
    # float rounding leaves ~1e-17 spread; still zero variance
    a = np.array([0.1 + 0.2, 0.3, 0.7 - 0.4])
    assert paired_t_test(a, np.full(3, 0.3)) == (0.0, 1.0)


# -- subgroups ---------------------------------------------------------------------------

def test_identical_subgroups_give_p_one():
    base = binary_inputs(40, seed=4)
    idx = np.r_[np.arange(40), np.arange(40)]
    doubled = base.take(idx)
    e = EvalInput(doubled.labels, doubled.preds, 2, doubled.scores,
                  ("female",) * 40 + ("male",) * 40, ("white",) * 40 + ("black",) * 40)
    rep = subgroup_report(e, ["auroc", "aupr"], BootstrapConfig(replicates=100, seed=2))
    assert {(s.axis, s.metric): s.p for s in rep.significance} == {
        ("sex", "auroc"): 1.0, ("sex", "aupr"): 1.0, ("race", "auroc"): 1.0, ("race", "aupr"): 1.0}
    assert rep.subgroups["sex=female"].metrics["auroc"].point == rep.subgroups["sex=male"].metrics["auroc"].point


def test_small_subgroup_is_flagged_and_untested():
    n = 60
    sex = ("female",) * 10 + ("male",) * 50
    race = ("white",) * 30 + ("asian",) * 30
    e = binary_inputs(n, seed=1, sex=sex, race=race)
    rep = subgroup_report(e, ["auroc"], BootstrapConfig(replicates=50), min_size=30)
    assert "sex=female" in rep.flags and "n=10" in rep.flags["sex=female"]
    sig = {s.axis: s for s in rep.significance}
    assert sig["sex"].p is None and "female" in sig["sex"].skipped
    assert sig["race"].p is not None and sig["race"].replicates == 50


def test_unknown_race_excluded_from_both_groups():
    assert binarize_race("Caucasian") == "white"
    assert binarize_race("Black") == "non-white"
    assert binarize_race("unknown") is None and binarize_race("") is None
    race = ("white",) * 35 + ("unknown",) * 10 + ("black",) * 35
    e = binary_inputs(80, seed=2, sex=("female", "male") * 40, race=race)
    rep = subgroup_report(e, ["auroc"], BootstrapConfig(replicates=30))
    assert rep.subgroups["race=white"].n + rep.subgroups["race=non-white"].n == 70


def test_subgroup_with_undefined_metric_is_reported():
    y = np.array([0, 1] * 20 + [0] * 40)
    s = np.linspace(0.01, 0.99, 80)
    e = EvalInput(y, (s > 0.5).astype(int), 2, s, ("female",) * 40 + ("male",) * 40, ("white",) * 80)
    rep = subgroup_report(e, ["auroc"], BootstrapConfig(replicates=20), axes=("sex",))
    assert rep.subgroups["sex=male"].metrics["auroc"].point is None
    assert "undefined" in rep.subgroups["sex=male"].flags["auroc"]
    assert rep.significance[0].skipped == "metric undefined in a subgroup"


def test_missing_demographics():
    with pytest.raises(ValueError):
        subgroup_report(binary_inputs(40), ["auroc"], BootstrapConfig(replicates=5))


# -- rendering ----------------------------------------------------------------------------

def test_cell_format():
    assert format_cell(0.8342, 0.80612, 0.86149) == "0.834 (0.806,0.861)"
    assert format_cell(0.8341, 0.8062, 0.8615) == "0.834 (0.806,0.861)"
    assert format_cell(0.86151, 1.0, 0.0) == "0.862 (1.000,0.000)"
    assert format_cell(None, None, None) == "-"
    assert format_cell(0.5, None, None) == "0.500"


def test_empty_table_is_header_only():
    assert render_table(["model", "AUROC"], []) == "model  AUROC\n"


def test_model_row_layout():
    rows = {"MoMA": {"macro-F1": Estimate(0.834, 0.806, 0.861), "micro-F1": Estimate(0.903, 0.886, 0.920),
                     "AUROC": Estimate(0.755, 0.702, 0.807), "AUPR": Estimate(0.491, 0.398, 0.580)},
            "LLaVA-Med": {"macro-F1": Estimate(0.802, 0.775, 0.829), "micro-F1": Estimate(0.883, 0.868, 0.899)}}
    text = results_table(rows, ["macro-F1", "micro-F1", "AUROC", "AUPR"])
    lines = text.splitlines()
    assert lines[1].split("  ", 1)[1].split() == ["0.834", "(0.806,0.861)", "0.903", "(0.886,0.920)",
                                                 "0.755", "(0.702,0.807)", "0.491", "(0.398,0.580)"]
    assert lines[2].split()[-2:] == ["-", "-"]


def test_reports_written_in_both_formats(tmp_path):
    e = binary_inputs(80, seed=3, sex=("female", "male") * 40, race=("white", "black") * 40)
    rep = subgroup_report(e, ["auroc", "f1"], BootstrapConfig(replicates=30))
    j, t = write_report(rep, tmp_path)
    body = json.loads(j.read_text())
    assert body["Overall"]["n"] == 80 and "sex=female" in body["Overall"]["subgroups"]
    text = t.read_text()
    assert "Paired t-tests" in text and "sex=male" in text
    with pytest.raises(ValueError):
        render_report(rep, "html")
