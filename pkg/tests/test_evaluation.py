import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score

from session_coder.evaluation import (
    EvalConfig,
    FoldError,
    SaliencyCurve,
    aggregate_saliency,
    check_partition,
    cross_validate,
    grouped_kfold,
    macro_f1,
    paired_bootstrap,
    relative_improvement,
    resample_curve,
    saliency_csv,
    summarize_toggles,
)
from session_coder.training import TrainConfig

from conftest import synthetic_examples


def test_grouped_kfold_partitions_without_overlap(rng):
    therapists = [f"t{int(i)}" for i in rng.integers(0, 30, size=150)]
    a = grouped_kfold(therapists, 10, seed=3)
    check_partition(a, therapists)
    assert a.k == 10
    for f, fold in enumerate(a.folds):
        assert all(a.therapist_fold[therapists[i]] == f for i in fold)
    sizes = [len(f) for f in a.folds]
    assert max(sizes) - min(sizes) <= max(therapists.count(t) for t in set(therapists))
    assert grouped_kfold(therapists, 10, seed=3) == a


def test_grouped_kfold_too_few_therapists():
    with pytest.raises(FoldError):
        grouped_kfold(["a", "a", "b"], 3)


def test_check_partition_detects_overlap():
    from session_coder.evaluation import FoldAssignment

    bad = FoldAssignment(((0,), (1,)), {"a": 0})
    with pytest.raises(FoldError):
        check_partition(bad, ["a", "a"])


def test_macro_f1_hand_example():
    f1, per_class, confusion = macro_f1([1, 1, 0, 0, 0], [1, 0, 0, 0, 1])
    assert confusion == {"tp": 1, "fp": 1, "fn": 1, "tn": 2}
    assert per_class[1]["f1"] == pytest.approx(0.5) and per_class[0]["f1"] == pytest.approx(2 / 3)
    assert f1 == pytest.approx((0.5 + 2 / 3) / 2)


def test_macro_f1_zero_division_convention():
    f1, per_class, _ = macro_f1([0, 0, 0], [0, 0, 0])
    assert per_class[1]["f1"] == 0.0 and f1 == 0.5


def test_macro_f1_matches_sklearn(rng):
    for _ in range(20):
        y = rng.integers(0, 2, size=30)
        p = rng.integers(0, 2, size=30)
        assert macro_f1(p, y)[0] == pytest.approx(f1_score(y, p, average="macro", zero_division=0), abs=1e-15)


def test_bootstrap_identical_systems():
    y = np.array([0, 1] * 20)
    p = y.copy()
    p[:5] ^= 1
    delta, pval = paired_bootstrap(p, p, y, n=2000, seed=1)
    assert delta == 0.0 and pval == 1.0


def test_bootstrap_perfect_vs_inverted():
    y = np.array([0] * 70 + [1] * 30)
    _, pval = paired_bootstrap(y, 1 - y, y, n=2000, seed=1)
    assert pval < 0.01
    assert paired_bootstrap(y, 1 - y, y, n=500, seed=4) == paired_bootstrap(y, 1 - y, y, n=500, seed=4)


def test_bootstrap_matches_loop_oracle(rng):
    y = rng.integers(0, 2, size=40)
    a = np.where(rng.random(40) < 0.8, y, 1 - y)
    b = np.where(rng.random(40) < 0.7, y, 1 - y)
    n = 300
    idx = np.random.default_rng(9).integers(0, 40, size=(n, 40))
    deltas = [
        f1_score(y[i], a[i], average="macro", zero_division=0) - f1_score(y[i], b[i], average="macro", zero_division=0)
        for i in idx
    ]
    expected = (sum(d <= 1e-15 for d in deltas) + 1) / (n + 1)
    assert paired_bootstrap(a, b, y, n=n, seed=9)[1] == pytest.approx(expected, abs=1e-12)


def test_bootstrap_rejects_misaligned():
    with pytest.raises(ValueError):
        paired_bootstrap([1, 0], [1], [1, 0])


def test_resample_curve_uniform_and_localized():
    np.testing.assert_allclose(resample_curve(np.full(7, 1 / 7)), 1.0, atol=1e-12)
    np.testing.assert_allclose(resample_curve(np.full(100, 0.01)), 1.0, atol=1e-12)
    alpha = np.zeros(10)
    alpha[0] = 1.0
    curve = resample_curve(alpha)
    assert curve.shape == (100,)
    assert curve[:10].mean() > 5 * curve[20:].mean()
    np.testing.assert_allclose(resample_curve([1.0]), 1.0, atol=1e-12)


def test_saliency_csv_layout():
    curves = [SaliencyCurve("ag", np.arange(100.0), 3), SaliencyCurve("mean", np.ones(100), 3)]
    lines = saliency_csv(curves).splitlines()
    assert lines[0] == "code," + ",".join(f"bin_{i}" for i in range(100))
    assert lines[1].startswith("ag,0.0,1.0") and len(lines[2].split(",")) == 101


def test_relative_improvement_example():
    assert round(100 * relative_improvement(69.15, 63.27), 2) == 9.29


def test_summarize_toggles():
    cells = []
    for m in (False, True):
        for mt in (False, True):
            for th in (False, True):
                cells.append({"metadata": m, "multi_task": mt, "therapist_only": th,
                              "macro_f1": 0.5 + 0.1 * m + 0.02 * mt})
    out = summarize_toggles(cells)
    assert out["metadata"]["mean_yes"] == pytest.approx(0.61)
    assert out["metadata"]["relative_improvement"] == pytest.approx(0.1 / 0.51)
    assert out["therapist_only"]["relative_improvement"] == pytest.approx(0.0)


TINY = TrainConfig(mode="multi_task", max_epochs=3, patience=2, batch_size=16,
                   hidden_units=4, attention_units=3, mlp_units=4, seed=11)


@pytest.fixture(scope="module")
def tiny_examples():
    return synthetic_examples(n_sessions=30, n_therapists=12)


def test_cross_validate_report_structure(tiny_examples):
    report = cross_validate(tiny_examples, TINY, EvalConfig(k=4, seed=2))
    assert len(report["folds"]) == 4
    assert sorted(report["predictions"]) == sorted(e.session_id for e in tiny_examples)
    seen = [s for f in report["folds"] for s in f["test_sessions"]]
    assert sorted(seen) == sorted(report["predictions"])
    owners = {}
    for f in report["folds"]:
        for t in f["therapists"]:
            assert owners.setdefault(t, f["fold"]) == f["fold"]
    assert 0.0 <= report["macro_f1"] <= 1.0


def test_cross_validate_is_byte_reproducible_and_parallel_safe(tiny_examples):
    ev = EvalConfig(k=3, seed=5)
    a = json.dumps(cross_validate(tiny_examples, TINY, ev), sort_keys=True)
    b = json.dumps(cross_validate(tiny_examples, TINY, ev), sort_keys=True)
    c = json.dumps(cross_validate(tiny_examples, TINY, ev, parallel_folds=2), sort_keys=True)
    assert a == b == c


def test_cross_validate_saliency_rows(tiny_examples):
    report = cross_validate(tiny_examples, replace(TINY, max_epochs=1), EvalConfig(k=3, seed=5),
                            collect_saliency=True)
    assert len(report["saliency"]) == 12 and list(report["saliency"])[-1] == "mean"
    single = cross_validate(tiny_examples, replace(TINY, max_epochs=1, mode="single_task"),
                            EvalConfig(k=3, seed=5), collect_saliency=True)
    assert list(single["saliency"]) == ["total"]


def test_resample_two_point_curve_decreases():
    curve = resample_curve([1.0, 0.0])
    assert curve[0] > 1.0 > curve[-1]
    assert np.all(np.diff(curve) <= 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(5, 400), st.integers(0, 2**31 - 1))
def test_resampled_curve_conserves_mass(T, seed):
    alpha = np.random.default_rng(seed).dirichlet(np.ones(T))
    assert abs(resample_curve(alpha).sum() / 100 - 1.0) <= 0.05


def test_bootstrap_p_non_increasing_in_observed_delta():
    y = np.array([0] * 30 + [1] * 20)
    base = y.copy()
    base[:10] ^= 1
    pvals = []
    for k in (10, 6, 3, 0):
        better = y.copy()
        better[:k] ^= 1
        pvals.append(paired_bootstrap(better, base, y, n=1000, seed=2)[1])
    assert all(b <= a for a, b in zip(pvals, pvals[1:]))


def test_cross_validate_independent_of_input_order(tiny_examples):
    ev = EvalConfig(k=3, seed=5)
    cfg = replace(TINY, max_epochs=1)
    a = json.dumps(cross_validate(tiny_examples, cfg, ev), sort_keys=True)
    b = json.dumps(cross_validate(list(reversed(tiny_examples)), cfg, ev), sort_keys=True)
    assert a == b


def test_aggregate_saliency_of_one_session_is_its_curve(tiny_examples):
    from session_coder.model import ModelConfig, forward, init_params

    ex = tiny_examples[0]
    params = init_params(ModelConfig(d=ex.matrix.shape[1], hidden_units=3, attention_units=2, mlp_units=2,
                                     meta_width=ex.meta.shape[0]), 0)
    _, trace = forward(ex.matrix, np.ones(len(ex.matrix)), ex.meta, params)
    curves = {c.code: c.bins for c in aggregate_saliency(params, [ex])}
    np.testing.assert_allclose(curves["ag"], resample_curve(trace.alphas["ag"][0]), atol=1e-14)
    doubled = {c.code: c.bins for c in aggregate_saliency(params, [ex, ex])}
    np.testing.assert_allclose(doubled["hw"], curves["hw"], atol=1e-14)
    np.testing.assert_allclose(curves["mean"], np.mean([curves[c] for c in curves if c != "mean"], axis=0))
