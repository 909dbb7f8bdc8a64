from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from svytree.frame import CATEGORICAL, NUMERIC, PREDICTOR, STUDY, Frame, VariableSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def make_frame(rng: np.random.Generator, N: int, levels=(4, 3), study_noise=1.0) -> Frame:
    """Small frame with categorical predictors a, b, ... and study variables y (continuous) and z (counts)."""
    specs, data = [], {}
    names = "abcdefg"
    for i, L in enumerate(levels):
        spec = VariableSpec(names[i], CATEGORICAL, tuple(str(k) for k in range(L)), PREDICTOR)
        specs.append(spec)
        data[spec.name] = rng.integers(0, L, N)
    effect = sum(data[names[i]] * (i + 1) for i in range(len(levels)))
    data["y"] = 1.0 + effect + study_noise * rng.normal(size=N)
    data["z"] = rng.poisson(0.3 + 0.2 * effect).astype(float)
    specs += [VariableSpec("y", NUMERIC, (), STUDY), VariableSpec("z", NUMERIC, (), STUDY)]
    return Frame(tuple(specs), data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_frame(rng):
    return make_frame(rng, 3000)
