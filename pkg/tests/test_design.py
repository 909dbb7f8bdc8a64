import math
from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_frame
from svytree.design import (
    DesignFamily,
    DesignSpec,
    PreparedDesign,
    SampleDraw,
    _partial_fisher_yates,
    allocate,
    compute_inclusion_probs,
    design_diagnostics,
    draw_sample,
    pps_probabilities,
)
from svytree.errors import (
    InfeasibleDesign,
    NonpositiveSize,
    OversampledStratum,
    SchemaError,
    ZeroInclusionProbability,
)
from svytree.frame import NUMERIC, PREDICTOR, STUDY, Frame, VariableSpec


@pytest.fixture
def frame(rng):
    return make_frame(rng, 1000, levels=(3, 2))


def test_srswor_probabilities(frame):
    pi = compute_inclusion_probs(DesignSpec.srswor(100), frame)
    assert np.all(pi == 0.1)


def test_census_probabilities(frame):
    assert np.all(compute_inclusion_probs(DesignSpec.census(), frame) == 1.0)


def test_stratified_probabilities(frame):
    counts = {"0": 10, "1": 20, "2": 30}
    pi = compute_inclusion_probs(DesignSpec.stratified("a", counts), frame)
    codes = frame.column("a")
    for h, k in counts.items():
        N_h = np.sum(codes == int(h))
        assert np.all(pi[codes == int(h)] == k / N_h)
    assert math.isclose(math.fsum(pi), 60, rel_tol=1e-12)


def test_oversampled_stratum(frame):
    N0 = int(np.sum(frame.column("a") == 0))
    with pytest.raises(OversampledStratum):
        compute_inclusion_probs(DesignSpec.stratified("a", {"0": N0 + 1}), frame)


def test_stratified_draw_sizes_and_determinism(frame):
    design = DesignSpec.stratified("a", {"0": 5, "1": 7, "2": 9})
    s = draw_sample(design, frame, 99)
    assert s.n == 21
    assert np.all(np.diff(s.indices) > 0)
    got = Counter(frame.column("a")[s.indices].tolist())
    assert got == {0: 5, 1: 7, 2: 9}
    np.testing.assert_array_equal(s.indices, draw_sample(design, frame, 99).indices)
    assert not np.array_equal(s.indices, draw_sample(design, frame, 100).indices)


def test_empirical_inclusion_frequencies_match_pi(rng):
    f = make_frame(rng, 60, levels=(2,))
    design = DesignSpec.stratified("a", {"0": 3, "1": 10})
    prep = PreparedDesign(design, f)
    R = 20_000
    hits = np.zeros(f.N)
    for r in range(R):
        hits[prep.draw(r).indices] += 1
    p = prep.pi
    z = (hits / R - p) / np.sqrt(p * (1 - p) / R)
    assert np.max(np.abs(z)) < 4.5


def test_partial_fisher_yates_is_uniform_over_subsets():
    rng = np.random.Generator(np.random.PCG64(5))
    M, k, R = 5, 2, 30_000
    counts = Counter(tuple(sorted(_partial_fisher_yates(rng, M, k).tolist())) for _ in range(R))
    subsets = list(combinations(range(M), k))
    assert set(counts) == set(subsets)
    expected = R / len(subsets)
    chi2 = sum((counts[s] - expected) ** 2 / expected for s in subsets)
    assert chi2 < 30  # 9 degrees of freedom; P(chi2 > 30) < 0.001


def test_pps_probabilities_oracle():
    sizes = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(pps_probabilities(sizes, 2), sizes * 2 / 10, rtol=1e-15)


def test_pps_capping():
    sizes = np.array([100.0, 1, 1, 1, 1])
    pi = pps_probabilities(sizes, 2)
    # the large unit is taken with certainty; one more unit shared by four equal ones
    np.testing.assert_allclose(pi, [1, 0.25, 0.25, 0.25, 0.25], rtol=1e-15)


@given(st.lists(st.floats(0.01, 1000), min_size=2, max_size=60), st.data())
def test_pps_probability_properties(sizes, data):
    sizes = np.array(sizes)
    n = data.draw(st.integers(1, len(sizes)))
    pi = pps_probabilities(sizes, n)
    assert abs(math.fsum(pi) - n) <= 1e-9 * n
    assert np.all((pi > 0) & (pi <= 1))
    free = pi < 1
    if free.sum() > 1:
        ratio = pi[free] / sizes[free]
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)


def test_pps_rejects_nonpositive_sizes():
    with pytest.raises(NonpositiveSize):
        pps_probabilities([1.0, 0.0], 1)
    with pytest.raises(InfeasibleDesign):
        pps_probabilities([1.0, 2.0], 3)


def test_pps_draw_expected_size():
    N = 2000
    sizes = np.random.default_rng(3).gamma(2.0, 1.0, N) + 0.1
    f = Frame((VariableSpec("s", NUMERIC, (), PREDICTOR), VariableSpec("y", NUMERIC, (), STUDY)),
              {"s": sizes, "y": sizes})
    prep = PreparedDesign(DesignSpec.pps("s", 100), f)
    ns = [prep.draw(r).n for r in range(400)]
    # Poisson sampling: var(n) = sum pi (1 - pi) <= n
    assert abs(np.mean(ns) - 100) < 5 * math.sqrt(100 / 400)


def test_strata_must_be_categorical():
    f = Frame((VariableSpec("s", NUMERIC, (), PREDICTOR), VariableSpec("y", NUMERIC, (), STUDY)),
              {"s": np.ones(5), "y": np.ones(5)})
    with pytest.raises(SchemaError):
        compute_inclusion_probs(DesignSpec.stratified("s", {}), f)


def test_sample_draw_validation():
    with pytest.raises(ZeroInclusionProbability):
        SampleDraw(np.array([0, 1]), np.array([0.5, 0.0]))
    with pytest.raises(SchemaError):
        SampleDraw(np.array([1, 1]), np.array([0.5, 0.5]))


def test_diagnostics_values(frame):
    counts = {"0": 10, "1": 20, "2": 30}
    d = design_diagnostics(DesignSpec.stratified("a", counts), frame)
    codes = frame.column("a")
    rates = [counts[str(h)] / np.sum(codes == h) for h in range(3)]
    assert d.N_min_pi == pytest.approx(frame.N * min(rates), rel=1e-12)
    assert d.max_weight == pytest.approx(1 / min(rates), rel=1e-12)
    assert d.weight_ratio == pytest.approx(max(rates) / min(rates), rel=1e-12)
    assert d.expected_n == pytest.approx(60, rel=1e-12)
    assert d.sampling_fraction == pytest.approx(60 / frame.N, rel=1e-12)


def test_diagnostics_zero_probability(frame):
    with pytest.raises(ZeroInclusionProbability):
        design_diagnostics(DesignSpec.stratified("a", {"0": 5, "1": 5}), frame)


def test_allocate_hand_examples():
    assert allocate({"a": 100, "b": 100}, {"a": 1, "b": 3}, 40) == {"a": 10, "b": 30}
    # stratum a would need 50 units but holds 10: take it completely
    assert allocate({"a": 10, "b": 1000}, {"a": 100, "b": 1}, 50) == {"a": 10, "b": 40}
    # every stratum keeps at least one unit
    assert allocate({"a": 1000, "b": 1000}, {"a": 1, "b": 1e-6}, 10) == {"a": 9, "b": 1}


@given(st.lists(st.integers(1, 500), min_size=1, max_size=8), st.data())
def test_allocate_properties(N_list, data):
    keys = [str(i) for i in range(len(N_list))]
    N_h = dict(zip(keys, N_list))
    rates = {k: data.draw(st.floats(0.001, 1.0)) for k in keys}
    n = data.draw(st.integers(len(keys), sum(N_list)))
    a = allocate(N_h, rates, n)
    assert sum(a.values()) == n
    assert all(1 <= a[k] <= N_h[k] for k in keys)


def test_allocate_infeasible():
    with pytest.raises(InfeasibleDesign):
        allocate({"a": 5}, {"a": 1}, 6)
    with pytest.raises(InfeasibleDesign):
        allocate({"a": 5, "b": 5}, {"a": 1, "b": 1}, 1)


def test_design_family_reaches_n(rng):
    f = make_frame(rng, 5000, levels=(4,))
    fam = DesignFamily(strata="a", rates={"0": 0.01, "1": 0.02, "2": 0.05, "3": 0.1})
    for n in (10, 100, 1000):
        d = fam.for_n(f, n)
        assert d.n == n
        assert draw_sample(d, f, 1).n == n
