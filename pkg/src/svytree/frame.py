"""Finite-population frames: schema, CSV ingestion and a seeded synthetic generator."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import tomli
import tomli_w

from .errors import (
    EmptyPopulation,
    InvalidCellMean,
    MissingHeader,
    MissingValue,
    NonNumeric,
    SchemaError,
    UnknownLevel,
    UnknownVariable,
)

CATEGORICAL = "categorical"
NUMERIC = "numeric"
PREDICTOR = "predictor"
STUDY = "study"

INDUSTRY_CODES = (
    "11", "21", "22", "23", "31", "32", "33", "42", "44", "45", "48", "49",
    "51", "52", "53", "54", "55", "56", "61", "62", "71", "72", "81", "99",
)
SIZE_CLASSES = ("1", "2", "3", "4", "5", "6")
MULTI = ("0", "1")
REGIONS = ("1", "2", "3", "4", "5", "6")

# Made-up marginals. They only need to be plausible for an establishment frame.
INDUSTRY_FREQS = (
    0.010, 0.006, 0.004, 0.080, 0.010, 0.015, 0.020, 0.060, 0.070, 0.040, 0.025, 0.005,
    0.020, 0.050, 0.040, 0.090, 0.005, 0.060, 0.015, 0.090, 0.030, 0.100, 0.100, 0.055,
)
SIZE_FREQS = (0.45, 0.25, 0.15, 0.08, 0.05, 0.02)
MULTI_FREQS = (0.8, 0.2)
REGION_FREQS = (0.20, 0.18, 0.17, 0.15, 0.15, 0.15)


@dataclass(frozen=True)
class VariableSpec:
    """One column of a frame."""

    name: str
    kind: str = CATEGORICAL
    levels: tuple[str, ...] = ()
    role: str = PREDICTOR

    def __post_init__(self):
        if not self.name or not str(self.name).isidentifier():
            raise SchemaError(f"invalid variable name {self.name!r}")
        if self.kind not in (CATEGORICAL, NUMERIC):
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.role not in (PREDICTOR, STUDY):
            raise SchemaError(f"{self.name}: unknown role {self.role!r}")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind == CATEGORICAL:
            if not self.levels:
                raise SchemaError(f"{self.name}: categorical variable needs levels")
            if len(set(self.levels)) != len(self.levels) or any(v == "" for v in self.levels):
                raise SchemaError(f"{self.name}: levels must be distinct and non-empty")
            if self.role == STUDY:
                raise SchemaError(f"{self.name}: study variables must be numeric")
        elif self.levels:
            raise SchemaError(f"{self.name}: numeric variable cannot have levels")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def code_of(self, value) -> int:
        """Level index of ``value``; raises UnknownLevel."""
        try:
            return self._index[str(value)]
        except KeyError:
            raise UnknownLevel(self.name, value) from None

    @cached_property
    def _index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.levels)}

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.is_categorical:
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariableSpec":
        return cls(
            name=d["name"],
            kind=d.get("kind", CATEGORICAL),
            levels=tuple(d.get("levels", ())),
            role=d.get("role", PREDICTOR),
        )


@dataclass(frozen=True, eq=False)
class Frame:
    """An immutable finite population.

    Categorical columns are stored as integer level codes, numeric columns as
    float64. Study variables are always numeric.
    """

    specs: tuple[VariableSpec, ...]
    data: Mapping[str, np.ndarray]

    def __post_init__(self):
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate variable names")
        if not any(s.role == PREDICTOR for s in specs) or not any(s.role == STUDY for s in specs):
            raise SchemaError("a frame needs at least one predictor and one study variable")
        data = {}
        lengths = set()
        for s in specs:
            if s.name not in self.data:
                raise SchemaError(f"no data for column {s.name!r}")
            col = np.asarray(self.data[s.name])
            if s.is_categorical:
                col = col.astype(np.int64)
                if col.size and (col.min() < 0 or col.max() >= len(s.levels)):
                    raise SchemaError(f"{s.name}: level code out of range")
            else:
                col = col.astype(np.float64)
                if not np.all(np.isfinite(col)):
                    raise SchemaError(f"{s.name}: non-finite values")
            col.setflags(write=False)
            data[s.name] = col
            lengths.add(col.shape[0])
        if len(lengths) != 1:
            raise SchemaError("columns have different lengths")
        if lengths.pop() < 1:
            raise EmptyPopulation("a frame needs at least one row")
        object.__setattr__(self, "data", data)

    @property
    def N(self) -> int:
        return int(next(iter(self.data.values())).shape[0])

    @cached_property
    def _spec_by_name(self) -> dict[str, VariableSpec]:
        return {s.name: s for s in self.specs}

    def spec(self, name: str) -> VariableSpec:
        try:
            return self._spec_by_name[name]
        except KeyError:
            raise UnknownVariable(f"no variable named {name!r}") from None

    @property
    def predictors(self) -> tuple[VariableSpec, ...]:
        return tuple(s for s in self.specs if s.role == PREDICTOR)

    @property
    def studies(self) -> tuple[VariableSpec, ...]:
        return tuple(s for s in self.specs if s.role == STUDY)

    def column(self, name: str) -> np.ndarray:
        """Raw storage: level codes for categorical columns, floats otherwise."""
        self.spec(name)
        return self.data[name]

    def labels(self, name: str) -> np.ndarray:
        spec = self.spec(name)
        if not spec.is_categorical:
            return self.data[name]
        return np.asarray(spec.levels, dtype=object)[self.data[name]]

    def total(self, study: str) -> float:
        """Population total t_y."""
        return math.fsum(self.column(study))

    def take(self, rows: Sequence[int]) -> "Frame":
        rows = np.asarray(rows, dtype=np.int64)
        return Frame(self.specs, {k: v[rows] for k, v in self.data.items()})

    def record(self, i: int) -> dict:
        return {s.name: (s.levels[self.data[s.name][i]] if s.is_categorical else float(self.data[s.name][i]))
                for s in self.specs}

    @cached_property
    def patterns(self) -> "Patterns":
        """Distinct predictor rows with population counts."""
        names = tuple(s.name for s in self.predictors)
        mat = np.column_stack([self.data[n].astype(np.float64) for n in names])
        uniq, inverse, counts = np.unique(mat, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        columns = {}
        for j, n in enumerate(names):
            col = uniq[:, j]
            columns[n] = col.astype(np.int64) if self.spec(n).is_categorical else col
        return Patterns(names=names, columns=columns, counts=counts.astype(np.int64), inverse=inverse)

    def to_csv(self, path) -> None:
        """Write the frame as UTF-8 CSV with a header row (atomic)."""
        atomic_write_text(path, self.to_csv_text())

    def to_csv_text(self) -> str:
        cols = []
        for s in self.specs:
            if s.is_categorical:
                cols.append(self.labels(s.name))
            else:
                cols.append([format_number(v) for v in self.data[s.name]])
        lines = [",".join(s.name for s in self.specs)]
        lines.extend(",".join(row) for row in zip(*cols))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Patterns:
    """Deduplicated predictor rows of a frame; ``inverse`` maps rows to patterns."""

    names: tuple[str, ...]
    columns: Mapping[str, np.ndarray]
    counts: np.ndarray
    inverse: np.ndarray

    def __len__(self):
        return int(self.counts.shape[0])


def format_number(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_frame(path, schema: Sequence[VariableSpec]) -> Frame:
    """Read a CSV frame, validating every value against ``schema``.

    Rows are numbered from 1 (the first data row) in error messages.
    """
    schema = tuple(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or all(not h.strip() for h in header):
            raise MissingHeader(f"{path}: no header row")
        header = [h.strip() for h in header]
        missing = [s.name for s in schema if s.name not in header]
        if missing:
            raise MissingHeader(f"{path}: header lacks columns {missing}")
        pos = {s.name: header.index(s.name) for s in schema}
        values = {s.name: [] for s in schema}
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            for s in schema:
                raw = row[pos[s.name]].strip() if pos[s.name] < len(row) else ""
                if raw == "" or raw.upper() in ("NA", "NAN", "NULL"):
                    raise MissingValue(rownum, s.name)
                if s.is_categorical:
                    try:
                        values[s.name].append(s.code_of(raw))
                    except UnknownLevel:
                        raise UnknownLevel(s.name, raw, row=rownum) from None
                else:
                    try:
                        x = float(raw)
                    except ValueError:
                        raise NonNumeric(rownum, s.name, raw) from None
                    if not math.isfinite(x):
                        raise NonNumeric(rownum, s.name, raw)
                    values[s.name].append(x)
    if not values[schema[0].name]:
        raise EmptyPopulation(f"{path}: no data rows")
    return Frame(schema, {k: np.asarray(v) for k, v in values.items()})


# --------------------------------------------------------------------------
# synthetic populations


@dataclass(frozen=True)
class PredictorModel:
    """A categorical predictor with its marginal level frequencies."""

    name: str
    levels: tuple[str, ...]
    freqs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        object.__setattr__(self, "freqs", tuple(float(f) for f in self.freqs))
        if len(self.levels) != len(self.freqs):
            raise SchemaError(f"{self.name}: levels and freqs differ in length")
        if any(f < 0 for f in self.freqs) or sum(self.freqs) <= 0:
            raise SchemaError(f"{self.name}: frequencies must be nonnegative with positive sum")


@dataclass(frozen=True)
class CellMean:
    """Mean for all cells matching ``where`` (variable -> allowed levels; absent = any)."""

    where: Mapping[str, frozenset]
    mean: float
    zero_inflation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "where", {k: frozenset(str(v) for v in vs) for k, vs in sorted(self.where.items())})
        if not (self.mean >= 0 and math.isfinite(self.mean)):
            raise InvalidCellMean(f"cell mean must be finite and nonnegative, got {self.mean}")
        if not 0.0 <= self.zero_inflation < 1.0:
            raise InvalidCellMean(f"zero inflation must be in [0, 1), got {self.zero_inflation}")

    def matches(self, x: Mapping[str, str]) -> bool:
        return all(str(x[k]) in vs for k, vs in self.where.items())


@dataclass(frozen=True)
class StudyModel:
    """Superpopulation model for one study variable: the first matching cell wins."""

    name: str
    cells: tuple[CellMean, ...] = ()
    default_mean: float = 0.01
    default_zero_inflation: float = 0.0
    noise: str = "poisson"

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not (self.default_mean >= 0 and math.isfinite(self.default_mean)):
            raise InvalidCellMean(f"{self.name}: default mean must be nonnegative")
        if self.noise not in ("poisson", "none"):
            raise SchemaError(f"{self.name}: unknown noise {self.noise!r}")

    def cell_for(self, x: Mapping[str, str]) -> tuple[float, float]:
        for c in self.cells:
            if c.matches(x):
                return c.mean, c.zero_inflation
        return self.default_mean, self.default_zero_inflation


def default_predictors() -> tuple[PredictorModel, ...]:
    return (
        PredictorModel("industry", INDUSTRY_CODES, INDUSTRY_FREQS),
        PredictorModel("size", SIZE_CLASSES, SIZE_FREQS),
        PredictorModel("multi", MULTI, MULTI_FREQS),
        PredictorModel("region", REGIONS, REGION_FREQS),
    )


@dataclass(frozen=True)
class SynthConfig:
    """A known superpopulation from which frames are generated.

    Predictors are drawn independently from their marginals with a PCG64
    generator seeded by ``seed``; each study value is then drawn from its
    noise distribution around the cell mean (zero-inflated Poisson, rescaled
    so the expectation equals the configured mean).
    """

    N: int
    seed: int = 0
    studies: tuple[StudyModel, ...] = (StudyModel("y"),)
    predictors: tuple[PredictorModel, ...] = field(default_factory=default_predictors)

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if not self.studies:
            raise SchemaError("at least one study variable is required")
        if not 0 <= int(self.seed) < 2**64:
            raise SchemaError("seed must be a 64-bit unsigned integer")
        names = [p.name for p in self.predictors]
        for st in self.studies:
            for c in st.cells:
                for k, vs in c.where.items():
                    if k not in names:
                        raise UnknownVariable(f"{st.name}: cell refers to unknown predictor {k!r}")
                    bad = vs - set(self.predictor(k).levels)
                    if bad:
                        raise UnknownLevel(k, sorted(bad)[0])

    def predictor(self, name: str) -> PredictorModel:
        for p in self.predictors:
            if p.name == name:
                return p
        raise UnknownVariable(f"no predictor named {name!r}")

    def study(self, name: str | None = None) -> StudyModel:
        if name is None:
            return self.studies[0]
        for s in self.studies:
            if s.name == name:
                return s
        raise UnknownVariable(f"no study variable named {name!r}")

    def schema(self) -> tuple[VariableSpec, ...]:
        specs = [VariableSpec(p.name, CATEGORICAL, p.levels, PREDICTOR) for p in self.predictors]
        specs += [VariableSpec(s.name, NUMERIC, (), STUDY) for s in self.studies]
        return tuple(specs)

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        out = {"N": int(self.N), "seed": int(self.seed), "predictors": [], "study": []}
        for p in self.predictors:
            out["predictors"].append({"name": p.name, "levels": list(p.levels), "freqs": list(p.freqs)})
        for s in self.studies:
            d = {"name": s.name, "default_mean": s.default_mean,
                 "default_zero_inflation": s.default_zero_inflation, "noise": s.noise, "cells": []}
            for c in s.cells:
                d["cells"].append({"mean": c.mean, "zero_inflation": c.zero_inflation,
                                   "where": {k: sorted(v, key=self.predictor(k).levels.index)
                                             for k, v in c.where.items()}})
            out["study"].append(d)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        try:
            preds = tuple(PredictorModel(p["name"], tuple(p["levels"]), tuple(p["freqs"]))
                          for p in d["predictors"]) if "predictors" in d else default_predictors()
            studies = []
            for s in d.get("study", [{"name": "y"}]):
                cells = tuple(CellMean(c.get("where", {}), float(c["mean"]), float(c.get("zero_inflation", 0.0)))
                              for c in s.get("cells", []))
                studies.append(StudyModel(s["name"], cells, float(s.get("default_mean", 0.01)),
                                          float(s.get("default_zero_inflation", 0.0)), s.get("noise", "poisson")))
            return cls(N=int(d["N"]), seed=int(d.get("seed", 0)), studies=tuple(studies), predictors=preds)
        except KeyError as exc:
            raise SchemaError(f"synthetic config lacks key {exc}") from None

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "SynthConfig":
        return cls.from_dict(tomli.loads(text))

    @classmethod
    def load(cls, path) -> "SynthConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))


def _cell_mean_arrays(model: StudyModel, config: SynthConfig, codes: Mapping[str, np.ndarray]):
    n = len(next(iter(codes.values())))
    mean = np.full(n, model.default_mean)
    zinf = np.full(n, model.default_zero_inflation)
    # apply in reverse so that earlier cells take precedence
    for c in reversed(model.cells):
        mask = np.ones(n, dtype=bool)
        for k, vs in c.where.items():
            levels = config.predictor(k).levels
            allowed = np.zeros(len(levels), dtype=bool)
            allowed[[levels.index(v) for v in vs]] = True
            mask &= allowed[codes[k]]
        mean[mask] = c.mean
        zinf[mask] = c.zero_inflation
    return mean, zinf


def synth_population(config: SynthConfig) -> Frame:
    """Generate a frame from ``config``; byte-identical for equal configs."""
    if config.N < 1:
        raise EmptyPopulation("N must be at least 1")
    rng = np.random.Generator(np.random.PCG64(int(config.seed)))
    codes = {}
    for p in config.predictors:
        freqs = np.asarray(p.freqs) / math.fsum(p.freqs)
        codes[p.name] = rng.choice(len(p.levels), size=config.N, p=freqs)
    data = dict(codes)
    for st in config.studies:
        mean, zinf = _cell_mean_arrays(st, config, codes)
        if st.noise == "none":
            data[st.name] = mean.copy()
            continue
        zero = rng.random(config.N) < zinf
        counts = rng.poisson(mean / (1.0 - zinf))
        data[st.name] = np.where(zero, 0, counts).astype(np.float64)
    return Frame(config.schema(), data)


def true_mean(config: SynthConfig, x: Mapping[str, object], study: str | None = None) -> float:
    """Superpopulation mean E[Y | X = x] for a predictor record."""
    rec = {}
    for p in config.predictors:
        if p.name not in x:
            raise UnknownVariable(f"record lacks predictor {p.name!r}")
        v = str(x[p.name])
        if v not in p.levels:
            raise UnknownLevel(p.name, x[p.name])
        rec[p.name] = v
    return float(config.study(study).cell_for(rec)[0])


def true_mean_frame(config: SynthConfig, frame: Frame, study: str | None = None) -> np.ndarray:
    """Vectorized ``true_mean`` over every row of a frame generated from ``config``."""
    codes = {p.name: frame.column(p.name) for p in config.predictors}
    return _cell_mean_arrays(config.study(study), config, codes)[0]


# --------------------------------------------------------------------------
# reference population

REFERENCE_N = 187_115

_SMALL = ("1", "2", "3")
_LARGE = ("4", "5", "6")
# teacher analog: industry groups whose marginal means coincide, so only the
# industry x size interaction is informative beyond size.
_TEACHER_G1 = ("11", "23", "31", "42", "45", "51", "53", "55", "61", "62", "81", "99")
_TEACHER_G2 = tuple(c for c in INDUSTRY_CODES if c not in _TEACHER_G1)
_WAIT_H1 = ("44", "45", "56", "71", "72", "81")


def _p(levels, freqs, subset):
    return sum(f for v, f in zip(levels, freqs) if v in subset)


def reference_studies() -> tuple[StudyModel, ...]:
    """Four study variables mirroring two high- and two low-prevalence occupations."""
    p_small = _p(SIZE_CLASSES, SIZE_FREQS, _SMALL)
    a = 1.25
    teacher = StudyModel(
        "teacher",
        cells=(
            CellMean({"industry": _TEACHER_G1, "size": _SMALL}, a),
            CellMean({"industry": _TEACHER_G2, "size": _LARGE}, a * p_small / (1.0 - p_small)),
        ),
        default_mean=0.0,
    )

    mid = ("2", "3", "4")
    rest = ("1", "5", "6")
    p_mid = _p(SIZE_CLASSES, SIZE_FREQS, mid)
    b = 2.4
    waitstaff = StudyModel(
        "waitstaff",
        cells=(
            CellMean({"industry": _WAIT_H1, "size": mid}, b),
            CellMean({"industry": tuple(c for c in INDUSTRY_CODES if c not in _WAIT_H1), "size": rest},
                     b * p_mid / (1.0 - p_mid)),
        ),
        default_mean=0.0,
    )

    # bartender analog: the leaf means of the published bartender tree
    rest_ind = tuple(c for c in INDUSTRY_CODES if c not in ("56", "81", "99", "71", "72", "31", "48", "53"))
    bartender = StudyModel(
        "bartender",
        cells=(
            CellMean({"industry": ("71", "72"), "size": ("3", "4", "5", "6")}, 2.88),
            CellMean({"industry": ("71", "72"), "size": ("1", "2"), "multi": ("1",)}, 0.15),
            CellMean({"industry": ("71", "72"), "size": ("1",)}, 0.41),
            CellMean({"industry": ("71", "72"), "size": ("2",), "region": ("3", "5", "6")}, 0.65),
            CellMean({"industry": ("71", "72"), "size": ("2",)}, 1.09),
            CellMean({"industry": ("56",), "size": ("4", "5", "6")}, 0.12),
            CellMean({"industry": ("56",), "size": ("2", "3")}, 0.01),
            CellMean({"industry": ("81", "99"), "region": ("4", "6")}, 0.12),
            CellMean({"industry": ("81", "99")}, 0.08),
            CellMean({"industry": ("31", "48", "53"), "size": ("2", "4", "6")}, 0.01),
            CellMean({"industry": rest_ind}, 0.0),
        ),
        default_mean=0.0,
    )

    size_effect = {"1": 0.04, "2": 0.09, "3": 0.2, "4": 0.4, "5": 0.7, "6": 1.3}
    heavy = ("42", "44", "45", "52", "53")
    cells = []
    for s, m in size_effect.items():
        cells.append(CellMean({"industry": heavy, "size": (s,)}, 1.6 * m))
        cells.append(CellMean({"size": (s,)}, m))
    salesmgr = StudyModel("salesmgr", cells=tuple(cells), default_mean=0.0)
    return teacher, waitstaff, bartender, salesmgr


def reference_config(N: int = REFERENCE_N, seed: int = 20170826) -> SynthConfig:
    return SynthConfig(N=N, seed=seed, studies=reference_studies())
