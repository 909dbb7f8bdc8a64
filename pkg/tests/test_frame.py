import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_frame
from svytree.errors import (
    EmptyPopulation,
    MissingHeader,
    MissingValue,
    NonNumeric,
    SchemaError,
    UnknownLevel,
    UnknownVariable,
)
from svytree.frame import (
    CATEGORICAL,
    INDUSTRY_CODES,
    NUMERIC,
    PREDICTOR,
    STUDY,
    CellMean,
    PredictorModel,
    StudyModel,
    SynthConfig,
    VariableSpec,
    load_frame,
    reference_config,
    synth_population,
    true_mean,
    true_mean_frame,
)

SCHEMA = (
    VariableSpec("g", CATEGORICAL, ("a", "b"), PREDICTOR),
    VariableSpec("y", NUMERIC, (), STUDY),
)


def write(tmp_path, text):
    p = tmp_path / "f.csv"
    p.write_text(text)
    return p


def test_load_frame_reads_values(tmp_path):
    f = load_frame(write(tmp_path, "y,g\n1.5,a\n2,b\n"), SCHEMA)
    assert f.N == 2
    assert list(f.labels("g")) == ["a", "b"]
    assert f.total("y") == 3.5


def test_empty_file_is_missing_header(tmp_path):
    with pytest.raises(MissingHeader):
        load_frame(write(tmp_path, ""), SCHEMA)


def test_missing_column_is_missing_header(tmp_path):
    with pytest.raises(MissingHeader):
        load_frame(write(tmp_path, "g\na\n"), SCHEMA)


def test_missing_value_reports_row(tmp_path):
    with pytest.raises(MissingValue) as e:
        load_frame(write(tmp_path, "g,y\na,1\nb,NA\n"), SCHEMA)
    assert e.value.row == 2 and e.value.column == "y"


def test_unknown_level_reports_row(tmp_path):
    with pytest.raises(UnknownLevel) as e:
        load_frame(write(tmp_path, "g,y\na,1\na,2\nc,3\n"), SCHEMA)
    assert e.value.row == 3 and e.value.value == "c"


def test_non_numeric_study_value(tmp_path):
    with pytest.raises(NonNumeric):
        load_frame(write(tmp_path, "g,y\na,x\n"), SCHEMA)


def test_header_only_is_empty_population(tmp_path):
    with pytest.raises(EmptyPopulation):
        load_frame(write(tmp_path, "g,y\n"), SCHEMA)


def test_csv_round_trip(tmp_path, small_frame):
    p = tmp_path / "frame.csv"
    small_frame.to_csv(p)
    back = load_frame(p, small_frame.specs)
    for s in small_frame.specs:
        np.testing.assert_array_equal(back.column(s.name), small_frame.column(s.name))
    assert p.read_text() == back.to_csv_text()


def test_variable_spec_validation():
    with pytest.raises(SchemaError):
        VariableSpec("x", CATEGORICAL, ("a", "a"), PREDICTOR)
    with pytest.raises(SchemaError):
        VariableSpec("x", "ordinal", (), PREDICTOR)


def test_columns_are_read_only(small_frame):
    with pytest.raises(ValueError):
        small_frame.column("y")[0] = 1.0


def test_patterns_reconstruct_rows(small_frame):
    pats = small_frame.patterns
    assert pats.counts.sum() == small_frame.N
    for name in pats.names:
        np.testing.assert_array_equal(pats.columns[name][pats.inverse], small_frame.column(name))


@given(st.integers(1, 400), st.integers(0, 2**32))
def test_patterns_property(N, seed):
    f = make_frame(np.random.default_rng(seed), N, levels=(3, 2, 5))
    pats = f.patterns
    assert pats.counts.sum() == N
    rows = np.column_stack([pats.columns[n] for n in pats.names])
    assert len({tuple(r) for r in rows}) == len(pats)


# synthetic populations -------------------------------------------------------

def small_config(seed=1, N=5000):
    preds = (PredictorModel("g", ("a", "b", "c"), (0.5, 0.3, 0.2)), PredictorModel("h", ("0", "1"), (0.6, 0.4)))
    study = StudyModel("y", (CellMean({"g": {"a"}, "h": {"1"}}, 3.0, 0.5), CellMean({"g": {"b"}}, 1.0)),
                       default_mean=0.2)
    return SynthConfig(N=N, seed=seed, studies=(study,), predictors=preds)


def test_synth_is_deterministic():
    a = synth_population(small_config())
    b = synth_population(small_config())
    assert a.to_csv_text() == b.to_csv_text()
    c = synth_population(small_config(seed=2))
    assert a.to_csv_text() != c.to_csv_text()


def test_synth_config_toml_round_trip():
    cfg = small_config()
    back = SynthConfig.loads(cfg.dumps())
    assert back == cfg
    assert synth_population(back).to_csv_text() == synth_population(cfg).to_csv_text()


def test_true_mean_first_matching_cell_wins():
    cfg = small_config()
    assert true_mean(cfg, {"g": "a", "h": "1"}) == 3.0
    assert true_mean(cfg, {"g": "b", "h": "1"}) == 1.0
    assert true_mean(cfg, {"g": "c", "h": "0"}) == 0.2


def test_synth_cell_means_match_configuration():
    # law of large numbers: cell averages approach the configured means
    cfg = small_config(N=200_000)
    f = synth_population(cfg)
    mu = true_mean_frame(cfg, f)
    y = f.column("y")
    for m in np.unique(mu):
        sel = mu == m
        # zero-inflated Poisson variance is at most m (1 + m z / (1 - z)) <= m (1 + m)
        se = math.sqrt(m * (1 + m) / sel.sum())
        assert abs(y[sel].mean() - m) < 5 * se
    freq_a = np.mean(f.labels("g") == "a")
    assert abs(freq_a - 0.5) < 5 * math.sqrt(0.25 / f.N)


def test_zero_inflation_produces_extra_zeros():
    cfg = small_config(N=100_000)
    f = synth_population(cfg)
    sel = (f.labels("g") == "a") & (f.labels("h") == "1")
    # P(0) = z + (1 - z) exp(-m / (1 - z)) with m = 3, z = 0.5
    p0 = 0.5 + 0.5 * math.exp(-6.0)
    assert abs(np.mean(f.column("y")[sel] == 0) - p0) < 5 * math.sqrt(p0 * (1 - p0) / sel.sum())


def test_cells_must_name_known_predictors():
    with pytest.raises(UnknownVariable):
        SynthConfig(N=10, studies=(StudyModel("y", (CellMean({"q": {"a"}}, 1.0),)),),
                    predictors=(PredictorModel("g", ("a",), (1.0,)),))


def test_reference_population_shape():
    f = synth_population(reference_config(N=20_000))
    assert f.spec("industry").levels == INDUSTRY_CODES
    assert len(INDUSTRY_CODES) == 24
    assert [s.name for s in f.studies] == ["teacher", "waitstaff", "bartender", "salesmgr"]
    assert [s.name for s in f.predictors] == ["industry", "size", "multi", "region"]


def test_take_and_record(small_frame):
    sub = small_frame.take([0, 5])
    assert sub.N == 2
    rec = small_frame.record(5)
    assert rec == sub.record(1)
