"""Monte Carlo comparison of estimators under repeated sampling.

Replicate r at sample size n is drawn with the PCG64 stream seeded by
``numpy.random.SeedSequence(base_seed, spawn_key=(n, r))``, so every
replicate has its own stream and results do not depend on how replicates
are scheduled across worker processes.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DesignFamily, PreparedDesign
from .errors import EmptyVector, InfeasibleDesign, InsufficientSampleSizes, SurveyError, UnknownVariable
from .estimate import (
    ESTIMATORS,
    GREG_LINEAR,
    GREG_TREE,
    HT,
    StepwiseControls,
    ht_total,
    linear_estimator,
    stepwise_select,
    tree_estimator,
)
from .frame import Frame, SynthConfig, synth_population
from .tree import GrowControls, grow_tree

DESK_SAMPLE_SIZES = (500, 1000, 2000)
DESK_REPLICATES = 200
FULL_SAMPLE_SIZES = (2000, 3000, 4000, 5000, 6000)
FULL_REPLICATES = 1000


@dataclass(frozen=True)
class SimConfig:
    frame: Frame | SynthConfig
    design: DesignFamily = field(default_factory=DesignFamily)
    sample_sizes: tuple[int, ...] = FULL_SAMPLE_SIZES
    replicates: int = FULL_REPLICATES
    estimators: tuple[str, ...] = ESTIMATORS
    study: tuple[str, ...] | None = None
    predictors: tuple[str, ...] | None = None
    base_seed: int = 0
    grow: GrowControls = field(default_factory=GrowControls)
    stepwise: StepwiseControls = field(default_factory=StepwiseControls)
    workers: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise InfeasibleDesign("replicates must be at least 1")
        if not self.sample_sizes:
            raise InfeasibleDesign("no sample sizes given")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise UnknownVariable(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")

    def to_dict(self) -> dict:
        return {
            "design": self.design.to_dict(),
            "sample_sizes": list(self.sample_sizes),
            "replicates": self.replicates,
            "estimators": list(self.estimators),
            "study": list(self.study) if self.study else None,
            "predictors": list(self.predictors) if self.predictors else None,
            "base_seed": self.base_seed,
            "grow": self.grow.to_dict(),
            "stepwise": self.stepwise.to_dict(),
        }


def replicate_seed(base_seed: int, n: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(n), int(r)))


@dataclass(frozen=True)
class SimCell:
    study: str
    estimator: str
    n: int
    replicates: int
    truth: float
    mean: float
    bias: float
    variance: float
    mse: float
    mse_se: float
    rel_eff: float
    mean_abs_error: float
    mae_se: float
    successes: int
    fallbacks: int


CSV_FIELDS = tuple(SimCell.__dataclass_fields__)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class SimReport:
    cells: list[SimCell]
    N: int
    truth: dict[str, float]
    replicates: int
    config: dict
    elapsed: float = 0.0
    estimates: dict = field(default_factory=dict, repr=False)

    def cell(self, study: str, estimator: str, n: int) -> SimCell:
        for c in self.cells:
            if (c.study, c.estimator, c.n) == (study, estimator, n):
                return c
        raise KeyError((study, estimator, n))

    def sample_sizes(self, study: str, estimator: str) -> list[int]:
        return sorted(c.n for c in self.cells if c.study == study and c.estimator == estimator)

    def to_csv_text(self) -> str:
        lines = [",".join(CSV_FIELDS)]
        for c in self.cells:
            lines.append(",".join(_fmt(getattr(c, f)) for f in CSV_FIELDS))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "N": self.N,
            "replicates": self.replicates,
            "truth": self.truth,
            "elapsed_seconds": self.elapsed,
            "config": self.config,
            "cells": [c.__dict__ for c in self.cells],
        }


def empirical_mse(estimates, truth: float) -> float:
    """Mean of squared deviations of replicate estimates from the true total."""
    e = np.asarray(estimates, dtype=np.float64)
    if e.size == 0:
        raise EmptyVector("no estimates")
    d = e - truth
    return math.fsum(d * d) / e.size


def _cell(study, est, n, truth, N, e, fallbacks, mse_ht) -> SimCell:
    R = e.size
    d = e - truth
    mean = math.fsum(e) / R
    mse = math.fsum(d * d) / R
    m4 = math.fsum(d ** 4) / R
    a = np.abs(d)
    mae = math.fsum(a) / R
    mae_var = math.fsum((a - mae) ** 2) / R
    return SimCell(
        study=study,
        estimator=est,
        n=int(n),
        replicates=R,
        truth=truth,
        mean=mean,
        bias=mean - truth,
        variance=math.fsum((e - mean) ** 2) / R,
        mse=mse,
        mse_se=math.sqrt(max(m4 - mse * mse, 0.0) / R),
        rel_eff=mse / mse_ht if mse_ht > 0 else (1.0 if mse == 0 else math.inf),
        mean_abs_error=mae / N,
        mae_se=math.sqrt(mae_var / R) / N,
        successes=int(R - fallbacks),
        fallbacks=int(fallbacks),
    )


class _Context:
    def __init__(self, frame: Frame, config: SimConfig, studies: Sequence[str]):
        self.frame = frame
        self.config = config
        self.studies = list(studies)
        self.prepared = {n: PreparedDesign(config.design.for_n(frame, n), frame) for n in config.sample_sizes}
        frame.patterns  # warm the cache once, before any fork

    def run_one(self, n: int, r: int):
        cfg = self.config
        s = self.prepared[n].draw(replicate_seed(cfg.base_seed, n, r))
        out = np.empty((len(self.studies), len(ESTIMATORS)))
        fb = np.zeros((len(self.studies), len(ESTIMATORS)), dtype=bool)
        w = s.weights
        for i, st in enumerate(self.studies):
            ht = ht_total(self.frame.column(st)[s.indices], w)
            out[i, 0] = ht
            if GREG_LINEAR in cfg.estimators:
                try:
                    terms = stepwise_select(self.frame, s, st, cfg.predictors, cfg.stepwise)
                    out[i, 1] = linear_estimator(s, self.frame, st, terms).total
                except SurveyError:
                    out[i, 1], fb[i, 1] = ht, True
            if GREG_TREE in cfg.estimators:
                try:
                    part = grow_tree(self.frame, s, cfg.predictors, st, cfg.grow)
                    out[i, 2] = tree_estimator(s, self.frame, part, st).total
                except SurveyError:
                    out[i, 2], fb[i, 2] = ht, True
        return out, fb

    def run_chunk(self, tasks):
        return [(n, r) + self.run_one(n, r) for n, r in tasks]


_WORKER_CTX: _Context | None = None


def _init_worker(frame, config, studies):
    global _WORKER_CTX
    _WORKER_CTX = _Context(frame, config, studies)


def _worker_chunk(tasks):
    return _WORKER_CTX.run_chunk(tasks)


def resolve_frame(source) -> Frame:
    if isinstance(source, Frame):
        return source
    if isinstance(source, SynthConfig):
        return synth_population(source)
    raise TypeError(f"cannot build a frame from {type(source).__name__}")


def run_simulation(config: SimConfig, progress=None) -> SimReport:
    """Run every replicate at every sample size and summarize each estimator.

    ``progress`` is an optional callable receiving (done, total).
    """
    t0 = time.perf_counter()
    frame = resolve_frame(config.frame)
    studies = list(config.study) if config.study else [s.name for s in frame.studies]
    for st in studies:
        if frame.spec(st).role != "study":
            raise UnknownVariable(f"{st!r} is not a study variable")
    for n in config.sample_sizes:
        if n > frame.N:
            raise InfeasibleDesign(f"sample size {n} exceeds N={frame.N}")
    ctx = _Context(frame, config, studies)
    R = config.replicates
    sizes = list(config.sample_sizes)
    est = np.empty((len(sizes), R, len(studies), len(ESTIMATORS)))
    fb = np.zeros(est.shape, dtype=bool)
    tasks = [(n, r) for n in sizes for r in range(R)]
    total = len(tasks)

    def store(results):
        for n, r, o, f in results:
            est[sizes.index(n), r] = o
            fb[sizes.index(n), r] = f

    if config.workers <= 1:
        for k, t in enumerate(tasks, 1):
            store(ctx.run_chunk([t]))
            if progress:
                progress(k, total)
    else:
        size = max(1, total // (config.workers * 8))
        chunks = [tasks[i:i + size] for i in range(0, total, size)]
        done = 0
        with ProcessPoolExecutor(config.workers, initializer=_init_worker,
                                 initargs=(frame, config, studies)) as pool:
            for res in pool.map(_worker_chunk, chunks):
                store(res)
                done += len(res)
                if progress:
                    progress(done, total)

    cells = []
    truth = {st: frame.total(st) for st in studies}
    for i, st in enumerate(studies):
        for a, n in enumerate(sizes):
            mse_ht = empirical_mse(est[a, :, i, 0], truth[st])
            for j, e in enumerate(ESTIMATORS):
                if e not in config.estimators:
                    continue
                cells.append(_cell(st, e, n, truth[st], frame.N, est[a, :, i, j], fb[a, :, i, j].sum(), mse_ht))
    estimates = {(st, e, n): est[a, :, i, j].copy()
                 for i, st in enumerate(studies) for a, n in enumerate(sizes)
                 for j, e in enumerate(ESTIMATORS) if e in config.estimators}
    return SimReport(cells=cells, N=frame.N, truth=truth, replicates=R, config=config.to_dict(),
                     elapsed=time.perf_counter() - t0, estimates=estimates)


@dataclass(frozen=True)
class ConsistencyResult:
    passed: bool
    sample_sizes: tuple[int, ...]
    mean_abs_error: tuple[float, ...]
    standard_errors: tuple[float, ...]
    violations: tuple[int, ...]


def consistency_check(report: SimReport, variable: str, estimator: str, slack: float = 2.0) -> ConsistencyResult:
    """Check that N^-1 E|t_hat - t| does not increase with n.

    Each step may rise by at most ``slack`` combined standard errors.
    """
    sizes = report.sample_sizes(variable, estimator)
    if len(sizes) < 3:
        raise InsufficientSampleSizes(f"need at least 3 sample sizes, report has {len(sizes)}")
    cells = [report.cell(variable, estimator, n) for n in sizes]
    m = [c.mean_abs_error for c in cells]
    se = [c.mae_se for c in cells]
    bad = tuple(sizes[i + 1] for i in range(len(m) - 1)
                if m[i + 1] > m[i] + slack * math.hypot(se[i], se[i + 1]))
    return ConsistencyResult(not bad, tuple(sizes), tuple(m), tuple(se), bad)


# --------------------------------------------------------------------------
# SVG chart

_STYLES = {HT: ("#2ca02c", ""), GREG_LINEAR: ("#ff7f0e", "8,4"), GREG_TREE: ("#1f77b4", "2,3")}


def report_svg(report: SimReport, width: int = 480, panel_height: int = 220) -> str:
    """MSE against n, one panel per study variable and one line per estimator."""
    studies = list(dict.fromkeys(c.study for c in report.cells))
    estimators = [e for e in ESTIMATORS if any(c.estimator == e for c in report.cells)]
    left, right, top, bottom = 70, 110, 24, 36
    H = panel_height * len(studies)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{H}" viewBox="0 0 {width} {H}">']
    for p, st in enumerate(studies):
        y0 = p * panel_height
        cells = [c for c in report.cells if c.study == st]
        ns = sorted({c.n for c in cells})
        mses = [c.mse for c in cells]
        lo_n, hi_n = min(ns), max(ns)
        hi_m = max(mses) * 1.05 or 1.0
        pw, ph = width - left - right, panel_height - top - bottom

        def sx(n):
            return left + (0.5 if hi_n == lo_n else (n - lo_n) / (hi_n - lo_n)) * pw

        def sy(m):
            return y0 + top + ph * (1 - m / hi_m)

        parts.append(f'<g class="panel" data-study="{st}">')
        parts.append(f'<text x="{left}" y="{y0 + 16}" font-size="13">{st}</text>')
        parts.append(f'<line class="x-axis" x1="{left}" y1="{sy(0):.2f}" x2="{left + pw}" y2="{sy(0):.2f}" stroke="black"/>')
        parts.append(f'<line class="y-axis" x1="{left}" y1="{sy(0):.2f}" x2="{left}" y2="{sy(hi_m):.2f}" stroke="black"/>')
        for n in ns:
            parts.append(f'<text x="{sx(n):.2f}" y="{sy(0) + 16:.2f}" font-size="10" text-anchor="middle">{n}</text>')
        parts.append(f'<text x="{left - 4}" y="{sy(hi_m) + 4:.2f}" font-size="10" text-anchor="end">{hi_m:.3g}</text>')
        for k, e in enumerate(estimators):
            colour, dash = _STYLES[e]
            pts = sorted((c.n, c.mse) for c in cells if c.estimator == e)
            path = " ".join(f"{sx(n):.2f},{sy(m):.2f}" for n, m in pts)
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            parts.append(f'<polyline data-estimator="{e}" points="{path}" fill="none" stroke="{colour}" '
                         f'stroke-width="2"{dash_attr}/>')
            for n, m in pts:
                parts.append(f'<circle data-study="{st}" data-estimator="{e}" data-n="{n}" data-mse="{m!r}" cx="{sx(n):.2f}" '
                             f'cy="{sy(m):.2f}" r="2.5" fill="{colour}"/>')
            ly = y0 + top + 14 * k
            parts.append(f'<text x="{left + pw + 8}" y="{ly + 4}" font-size="10" fill="{colour}">{e}</text>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
