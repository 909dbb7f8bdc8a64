"""Sampling designs, exact first-order inclusion probabilities and seeded draws.

Random numbers come from numpy's PCG64 bit generator. A draw seeded with a
64-bit integer ``seed`` uses ``PCG64(seed)``; the Monte Carlo harness passes a
``numpy.random.SeedSequence`` instead. Within each stratum, units are chosen
by a partial Fisher-Yates shuffle over the stratum members in frame order: for
step i the swap partner is ``integers(i, N_h)``, all n_h partners drawn in one
vectorized call. Sampled indices are reported in ascending frame order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    InfeasibleDesign,
    NonpositiveSize,
    OversampledStratum,
    SchemaError,
    ZeroInclusionProbability,
)
from .frame import Frame

STRATIFIED = "stratified"
PPS = "pps"
SRSWOR = "srswor"
CENSUS = "census"

# Sampling rates by size class for the reference experiment, scaled to hit n.
SIZE_CLASS_RATES = {"1": 0.005, "2": 0.01, "3": 0.02, "4": 0.05, "5": 0.15, "6": 0.40}

PPS_TOL = 1e-12


@dataclass(frozen=True)
class DesignSpec:
    kind: str
    n: int = 0
    strata: str | None = None
    counts: Mapping[str, int] = field(default_factory=dict)
    size_variable: str | None = None

    def __post_init__(self):
        if self.kind not in (STRATIFIED, PPS, SRSWOR, CENSUS):
            raise SchemaError(f"unknown design kind {self.kind!r}")
        object.__setattr__(self, "counts", {str(k): int(v) for k, v in self.counts.items()})
        if self.kind == STRATIFIED:
            if not self.strata:
                raise SchemaError("stratified design needs a strata variable")
            if any(v < 0 for v in self.counts.values()):
                raise InfeasibleDesign("negative stratum sample size")
            object.__setattr__(self, "n", sum(self.counts.values()))
        if self.kind == PPS and not self.size_variable:
            raise SchemaError("PPS design needs a size variable")
        if self.kind in (PPS, SRSWOR) and self.n < 1:
            raise InfeasibleDesign("sample size must be positive")

    @classmethod
    def stratified(cls, strata: str, counts: Mapping[str, int]) -> "DesignSpec":
        return cls(STRATIFIED, strata=strata, counts=counts)

    @classmethod
    def pps(cls, size_variable: str, n: int) -> "DesignSpec":
        return cls(PPS, n=n, size_variable=size_variable)

    @classmethod
    def srswor(cls, n: int) -> "DesignSpec":
        return cls(SRSWOR, n=n)

    @classmethod
    def census(cls) -> "DesignSpec":
        return cls(CENSUS)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "n": self.n}
        if self.strata:
            d["strata"] = self.strata
            d["counts"] = dict(self.counts)
        if self.size_variable:
            d["size_variable"] = self.size_variable
        return d


@dataclass(frozen=True)
class SampleDraw:
    """A realized sample: sorted frame row indices with their inclusion probabilities."""

    indices: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        pi = np.asarray(self.pi, dtype=np.float64)
        if idx.shape != pi.shape:
            raise SchemaError("indices and pi differ in length")
        if np.any((pi <= 0) | (pi > 1)):
            raise ZeroInclusionProbability("sampled units need 0 < pi <= 1")
        if len(np.unique(idx)) != len(idx):
            raise SchemaError("duplicate sample indices")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "pi", pi)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.pi

    @property
    def n(self) -> int:
        return int(self.indices.shape[0])


def _strata_codes(design: DesignSpec, frame: Frame):
    spec = frame.spec(design.strata)
    if not spec.is_categorical:
        raise SchemaError(f"strata variable {design.strata!r} must be categorical")
    for k in design.counts:
        spec.code_of(k)
    codes = frame.column(design.strata)
    N_h = np.bincount(codes, minlength=len(spec.levels))
    n_h = np.array([design.counts.get(lv, 0) for lv in spec.levels], dtype=np.int64)
    for lv, a, b in zip(spec.levels, n_h, N_h):
        if a > b:
            raise OversampledStratum(f"stratum {lv!r}: n_h={a} exceeds N_h={b}")
    return codes, n_h, N_h


def pps_probabilities(sizes, n: float) -> np.ndarray:
    """pi_j = min(1, n s_j / sum s) with iterative capping so that sum(pi) = n."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(~np.isfinite(sizes)) or np.any(sizes <= 0):
        raise NonpositiveSize("PPS size values must be strictly positive")
    if n > len(sizes):
        raise InfeasibleDesign(f"expected size {n} exceeds N={len(sizes)}")
    capped = np.zeros(len(sizes), dtype=bool)
    while True:
        free = ~capped
        remaining = n - capped.sum()
        pi = np.ones_like(sizes)
        if free.any():
            pi[free] = remaining * sizes[free] / math.fsum(sizes[free])
        newly = free & (pi >= 1.0)
        if not newly.any():
            break
        capped |= newly
    pi = np.minimum(pi, 1.0)
    if abs(math.fsum(pi) - n) > PPS_TOL * max(n, 1.0):
        raise InfeasibleDesign("PPS capping did not converge")
    return pi


def compute_inclusion_probs(design: DesignSpec, frame: Frame) -> np.ndarray:
    """First-order inclusion probabilities for every unit of the frame."""
    N = frame.N
    if design.kind == CENSUS:
        return np.ones(N)
    if design.kind == SRSWOR:
        if design.n > N:
            raise OversampledStratum(f"n={design.n} exceeds N={N}")
        return np.full(N, design.n / N)
    if design.kind == STRATIFIED:
        codes, n_h, N_h = _strata_codes(design, frame)
        rate = np.divide(n_h, N_h, out=np.zeros(len(n_h)), where=N_h > 0)
        return rate[codes]
    return pps_probabilities(frame.column(design.size_variable), design.n)


class PreparedDesign:
    """A design bound to a frame, with strata membership precomputed for repeated draws."""

    def __init__(self, design: DesignSpec, frame: Frame):
        self.design = design
        self.frame = frame
        self.pi = compute_inclusion_probs(design, frame)
        self._groups = []
        if design.kind == STRATIFIED:
            codes, n_h, _ = _strata_codes(design, frame)
            order = np.argsort(codes, kind="stable")
            bounds = np.searchsorted(codes[order], np.arange(len(n_h) + 1))
            for h, k in enumerate(n_h):
                if k > 0:
                    self._groups.append((order[bounds[h]:bounds[h + 1]], int(k)))
        elif design.kind == SRSWOR:
            self._groups.append((np.arange(frame.N), design.n))

    def draw(self, seed) -> SampleDraw:
        rng = np.random.Generator(np.random.PCG64(seed))
        if self.design.kind == CENSUS:
            idx = np.arange(self.frame.N)
        elif self.design.kind == PPS:
            idx = np.flatnonzero(rng.random(self.frame.N) < self.pi)
        else:
            chosen = [members[_partial_fisher_yates(rng, len(members), k)] for members, k in self._groups]
            idx = np.sort(np.concatenate(chosen)) if chosen else np.arange(0)
        return SampleDraw(idx, self.pi[idx])


def _partial_fisher_yates(rng: np.random.Generator, M: int, k: int) -> np.ndarray:
    """First k positions of a Fisher-Yates shuffle of range(M), without materializing it."""
    partners = rng.integers(np.arange(k), M)
    swapped: dict[int, int] = {}
    out = np.empty(k, dtype=np.int64)
    for i, j in enumerate(partners.tolist()):
        vi = swapped.get(i, i)
        vj = swapped.get(j, j)
        swapped[j] = vi
        out[i] = vj
    return out


def draw_sample(design: DesignSpec, frame: Frame, seed) -> SampleDraw:
    return PreparedDesign(design, frame).draw(seed)


@dataclass(frozen=True)
class DesignDiagnostics:
    N: int
    expected_n: float
    N_min_pi: float
    max_weight: float
    weight_ratio: float
    sampling_fraction: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def design_diagnostics(design: DesignSpec, frame: Frame) -> DesignDiagnostics:
    """Quantities that govern design consistency: N min pi, weight spread and n/N."""
    pi = compute_inclusion_probs(design, frame)
    lo = float(pi.min())
    if lo <= 0:
        raise ZeroInclusionProbability(
            f"{int(np.sum(pi <= 0))} units have zero inclusion probability")
    hi = float(pi.max())
    n = math.fsum(pi)
    return DesignDiagnostics(
        N=frame.N,
        expected_n=n,
        N_min_pi=frame.N * lo,
        max_weight=1.0 / lo,
        weight_ratio=hi / lo,
        sampling_fraction=n / frame.N,
    )


def allocate(N_h: Mapping[str, int], rates: Mapping[str, float], n: int) -> dict[str, int]:
    """Stratum sample sizes proportional to N_h * rate_h, summing exactly to n.

    Strata whose share would exceed N_h are taken completely and the rest is
    redistributed; fractional parts are settled by largest remainder (ties in
    stratum order). Every nonempty stratum gets at least one unit.
    """
    keys = [k for k in N_h if N_h[k] > 0]
    total = sum(N_h[k] for k in keys)
    if n > total:
        raise InfeasibleDesign(f"n={n} exceeds N={total}")
    if n < len(keys):
        raise InfeasibleDesign(f"n={n} is smaller than the number of strata ({len(keys)})")
    for k in keys:
        if rates.get(k, 0) <= 0:
            raise InfeasibleDesign(f"stratum {k!r} has no positive rate")
    full: set[str] = set()
    while True:
        free = [k for k in keys if k not in full]
        budget = n - sum(N_h[k] for k in full)
        mass = math.fsum(N_h[k] * rates[k] for k in free)
        raw = {k: budget * N_h[k] * rates[k] / mass for k in free}
        over = [k for k in free if raw[k] >= N_h[k]]
        if not over:
            break
        full.update(over)
    alloc = {k: N_h[k] for k in full}
    alloc.update({k: int(math.floor(raw[k])) for k in free})
    short = n - sum(alloc.values())
    for k in sorted(free, key=lambda k: (-(raw[k] - math.floor(raw[k])), keys.index(k)))[:short]:
        alloc[k] += 1
    for k in keys:
        while alloc[k] < 1:
            donor = max(keys, key=lambda j: (alloc[j], -keys.index(j)))
            alloc[donor] -= 1
            alloc[k] += 1
    return {k: alloc[k] for k in keys}


@dataclass(frozen=True)
class DesignFamily:
    """A design parameterized by target sample size n.

    ``kind`` is one of stratified (rates per stratum level, scaled to n),
    pps, srswor or census.
    """

    kind: str = STRATIFIED
    strata: str | None = "size"
    rates: Mapping[str, float] = field(default_factory=lambda: dict(SIZE_CLASS_RATES))
    size_variable: str | None = None

    def for_n(self, frame: Frame, n: int) -> DesignSpec:
        if self.kind == STRATIFIED:
            spec = frame.spec(self.strata)
            counts = np.bincount(frame.column(self.strata), minlength=len(spec.levels))
            N_h = {lv: int(c) for lv, c in zip(spec.levels, counts)}
            return DesignSpec.stratified(self.strata, allocate(N_h, self.rates, n))
        if self.kind == PPS:
            return DesignSpec.pps(self.size_variable, n)
        if self.kind == SRSWOR:
            return DesignSpec.srswor(n)
        if self.kind == CENSUS:
            return DesignSpec.census()
        raise SchemaError(f"unknown design kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == STRATIFIED:
            d.update(strata=self.strata, rates=dict(self.rates))
        if self.kind == PPS:
            d["size_variable"] = self.size_variable
        return d
