import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_frame
from svytree.design import DesignSpec, SampleDraw, draw_sample
from svytree.errors import (
    EmptySampleBox,
    LengthMismatch,
    NonpositiveWeight,
    PredictionFailure,
    SingularSystem,
    UnknownVariable,
)
from svytree.estimate import (
    GREG_TREE,
    StepwiseControls,
    calibration_weights,
    design_matrix,
    greg_total,
    ht_estimator,
    ht_total,
    independent_columns,
    linear_estimator,
    linear_fit,
    linear_weights,
    population_totals,
    stepwise_select,
    tree_estimator,
)
from svytree.tree import GrowControls, grow_tree


def test_ht_total_oracle():
    assert ht_total([1.0, 2.0, 3.0], [10.0, 20.0, 30.0]) == 140.0
    with pytest.raises(LengthMismatch):
        ht_total([1.0], [1.0, 2.0])
    with pytest.raises(NonpositiveWeight):
        ht_total([1.0, 2.0], [1.0, 0.0])


def test_greg_zero_model_is_ht(small_frame):
    s = draw_sample(DesignSpec.srswor(300), small_frame, 1)
    g = greg_total(s, small_frame, lambda f: np.zeros(f.N), "y")
    assert g == pytest.approx(ht_total(small_frame.column("y")[s.indices], s.weights), rel=1e-14)


def test_greg_perfect_model_is_exact(small_frame):
    s = draw_sample(DesignSpec.srswor(300), small_frame, 2)
    g = greg_total(s, small_frame, lambda f: f.column("y"), "y")
    assert g == pytest.approx(small_frame.total("y"), rel=1e-13)


def test_greg_wraps_prediction_errors(small_frame):
    s = draw_sample(DesignSpec.srswor(30), small_frame, 2)

    def bad(f):
        raise RuntimeError("boom")

    with pytest.raises(PredictionFailure):
        greg_total(s, small_frame, bad, "y")
    with pytest.raises(PredictionFailure):
        greg_total(s, small_frame, lambda f: np.full(f.N, np.nan), "y")
    with pytest.raises(UnknownVariable):
        greg_total(s, small_frame, lambda f: np.zeros(f.N), "a")


def closed_form_weights(w, X, t):
    """w_j (1 + (t - X'w)' (X' W X)^-1 x_j) via a direct dense solve."""
    T = (X * w[:, None]).T @ X
    lam = np.linalg.solve(T, t - X.T @ w)
    return w * (1 + X @ lam)


def test_linear_weights_match_closed_form(rng):
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(size=n)])
    w = rng.uniform(5, 15, n)
    t = np.array([2000.0, 30.0, 1000.0])
    got = linear_weights(w, X, t)
    np.testing.assert_allclose(got, closed_form_weights(w, X, t), rtol=1e-10)
    np.testing.assert_allclose(X.T @ got, t, rtol=1e-10)


def test_collinear_columns_are_dropped(rng):
    n = 100
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x, 2 * x + 1])
    w = rng.uniform(1, 2, n)
    t = np.array([150.0, 10.0, 170.0])
    fit = linear_fit(w, X, t)
    assert fit.kept.tolist() == [True, True, False]
    np.testing.assert_allclose(fit.weights, closed_form_weights(w, X[:, :2], t[:2]), rtol=1e-10)
    assert independent_columns(X, w).tolist() == [True, True, False]


def test_singular_system():
    with pytest.raises(SingularSystem):
        linear_fit(np.ones(5), np.zeros((5, 2)), np.zeros(2))


def test_intercept_only_calibration_is_ratio_to_N(small_frame):
    s = draw_sample(DesignSpec.srswor(250), small_frame, 3)
    res = linear_estimator(s, small_frame, "y", [])
    ybar = small_frame.column("y")[s.indices].mean()
    assert res.total == pytest.approx(small_frame.N * ybar, rel=1e-12)


def test_design_matrix_and_population_totals(small_frame):
    X = design_matrix(small_frame, ["a", "b"])
    assert X.shape == (small_frame.N, 1 + 3 + 2)
    np.testing.assert_allclose(population_totals(small_frame, ["a", "b"]), X.sum(axis=0), rtol=1e-15)
    Xi = design_matrix(small_frame, ["a:b"])
    np.testing.assert_allclose(population_totals(small_frame, ["a:b"]), Xi.sum(axis=0), rtol=1e-15)


def test_linear_calibrates_each_category(small_frame):
    s = draw_sample(DesignSpec.stratified("a", {"0": 30, "1": 40, "2": 50, "3": 60}), small_frame, 4)
    res = linear_estimator(s, small_frame, "y", ["a", "b"])
    X = design_matrix(small_frame, ["a", "b"], s.indices)
    np.testing.assert_allclose(X.T @ res.calibration_weights, population_totals(small_frame, ["a", "b"]),
                               rtol=1e-10)


def test_stepwise_picks_the_signal(rng):
    f = make_frame(rng, 4000, levels=(3, 4, 2), study_noise=0.1)
    # y = 1 + a + 2b + 3c + noise; b carries the most variance (5 vs 2.25 for c, 2/3 for a)
    s = draw_sample(DesignSpec.srswor(600), f, 5)
    assert set(stepwise_select(f, s, "y")) == {"a", "b", "c"}
    assert stepwise_select(f, s, "y", controls=StepwiseControls(max_steps=1)) == ["b"]


def test_stepwise_constant_study_variable(small_frame):
    from svytree.frame import NUMERIC, STUDY, Frame, VariableSpec

    specs = small_frame.specs + (VariableSpec("k", NUMERIC, (), STUDY),)
    data = {s.name: small_frame.column(s.name) for s in small_frame.specs}
    data["k"] = np.full(small_frame.N, 3.0)
    f = Frame(specs, data)
    s = draw_sample(DesignSpec.srswor(100), f, 6)
    assert stepwise_select(f, s, "k") == []


def test_tree_estimator_is_post_stratification(small_frame):
    s = draw_sample(DesignSpec.stratified("a", {"0": 40, "1": 50, "2": 60, "3": 70}), small_frame, 7)
    part = grow_tree(small_frame, s, study="z", controls=GrowControls(min_node=20))
    res = tree_estimator(s, small_frame, part)
    leaf = part.classify_frame(small_frame)
    y = small_frame.column("z")
    total = 0.0
    for k in range(part.q):
        m = leaf[s.indices] == k
        w = s.weights[m]
        total += np.sum(leaf == k) * np.sum(w * y[s.indices][m]) / np.sum(w)
    assert res.estimator_kind == GREG_TREE
    assert res.total == pytest.approx(total, rel=1e-12)
    assert res.model_summary["greg_form"] == pytest.approx(total, rel=1e-9)
    cw = calibration_weights(part, s, small_frame)
    np.testing.assert_allclose(np.bincount(leaf[s.indices], weights=cw, minlength=part.q),
                               part.box_counts(small_frame), rtol=1e-12)
    np.testing.assert_allclose(cw, res.calibration_weights, rtol=1e-15)


def test_single_box_tree_is_hajek(small_frame):
    s = draw_sample(DesignSpec.srswor(200), small_frame, 8)
    part = grow_tree(small_frame, s, study="y", controls=GrowControls(max_depth=0))
    res = tree_estimator(s, small_frame, part)
    assert res.total == pytest.approx(small_frame.N * small_frame.column("y")[s.indices].mean(), rel=1e-12)


def test_empty_sample_box(small_frame):
    census = draw_sample(DesignSpec.census(), small_frame, 0)
    part = grow_tree(small_frame, census, study="y")
    leaf = part.classify_frame(small_frame)
    keep = np.flatnonzero(leaf != 0)[:50]
    s = SampleDraw(keep, np.full(keep.size, 0.5))
    with pytest.raises(EmptySampleBox):
        tree_estimator(s, small_frame, part)


@given(st.integers(0, 2**32), st.integers(30, 400))
def test_census_exactness_property(seed, N):
    f = make_frame(np.random.default_rng(seed), N, levels=(3, 2))
    s = draw_sample(DesignSpec.census(), f, 0)
    t = f.total("z")
    assert ht_estimator(s, f, "z").total == pytest.approx(t, rel=1e-10, abs=1e-9)
    part = grow_tree(f, s, study="z", controls=GrowControls(min_node=5))
    assert tree_estimator(s, f, part).total == pytest.approx(t, rel=1e-10, abs=1e-9)
    assert linear_estimator(s, f, "z", ["a", "b"]).total == pytest.approx(t, rel=1e-10, abs=1e-9)


@given(st.integers(0, 2**32))
def test_calibration_weights_reproduce_box_counts(seed):
    rng = np.random.default_rng(seed)
    f = make_frame(rng, 2000, levels=(4, 3))
    s = draw_sample(DesignSpec.stratified("a", {"0": 30, "1": 40, "2": 50, "3": 60}), f, seed)
    part = grow_tree(f, s, study="z", controls=GrowControls(min_node=15))
    cw = calibration_weights(part, s, f)
    leaf = part.classify_frame(f)[s.indices]
    got = np.bincount(leaf, weights=cw, minlength=part.q)
    np.testing.assert_allclose(got, part.box_counts(f), rtol=1e-10)
    assert math.isclose(cw.sum(), f.N, rel_tol=1e-10)
