"""Estimators of a finite population total.

* Horvitz-Thompson expansion estimator.
* Generalized regression (GREG) estimator for an arbitrary working model.
* Linear GREG / calibration weights, with forward stepwise selection of
  categorical indicator blocks.
* The regression tree estimator, computed both as a GREG estimator and as a
  post-stratification estimator over the tree's boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    EmptySampleBox,
    IdentityViolation,
    LengthMismatch,
    NonpositiveWeight,
    PredictionFailure,
    SingularSystem,
    SurveyError,
    UnknownVariable,
)
from .frame import Frame
from .tree import Partition

HT = "HT"
GREG_LINEAR = "GREG-linear"
GREG_TREE = "GREG-tree"
ESTIMATORS = (HT, GREG_LINEAR, GREG_TREE)

RANK_TOL = 1e-10


@dataclass
class EstimateResult:
    total: float
    estimator_kind: str
    model_summary: dict = field(default_factory=dict)
    calibration_weights: np.ndarray | None = None

    def weight_diagnostics(self) -> dict | None:
        w = self.calibration_weights
        if w is None:
            return None
        return {"min": float(w.min()), "max": float(w.max()), "negative": int(np.sum(w < 0)), "count": int(w.size)}

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator_kind,
            "total": self.total,
            "model": self.model_summary,
            "weights": self.weight_diagnostics(),
        }


def _check_yw(y, w):
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if y.shape != w.shape:
        raise LengthMismatch(f"y has {y.size} values but w has {w.size}")
    if np.any(~(w > 0)):
        raise NonpositiveWeight("all design weights must be positive")
    return y, w


def ht_total(y, w) -> float:
    """Horvitz-Thompson total sum(w_j y_j)."""
    y, w = _check_yw(y, w)
    return math.fsum(w * y)


def _sample_y(sample, frame: Frame, study: str):
    if frame.spec(study).role != "study":
        raise UnknownVariable(f"{study!r} is not a study variable")
    return _check_yw(frame.column(study)[sample.indices], sample.weights)


def greg_total(sample, frame: Frame, predict_fn: Callable[[Frame], np.ndarray], study: str) -> float:
    """GREG total: weighted sample residuals plus model predictions summed over U.

    ``predict_fn`` receives the whole frame and returns one prediction per row.
    """
    y, w = _sample_y(sample, frame, study)
    try:
        pred = np.asarray(predict_fn(frame), dtype=np.float64)
    except SurveyError as exc:
        raise PredictionFailure(f"{exc.name}: {exc}") from exc
    except Exception as exc:
        raise PredictionFailure(str(exc)) from exc
    if pred.shape != (frame.N,) or not np.all(np.isfinite(pred)):
        raise PredictionFailure("predictions must be finite, one per frame row")
    return math.fsum(w * (y - pred[sample.indices])) + math.fsum(pred)


# --------------------------------------------------------------------------
# linear calibration


def _orthonormal_basis(A: np.ndarray, tol: float = RANK_TOL):
    """Gram-Schmidt (twice) over the columns of A in order.

    A column is dropped when its residual, relative to its own norm, falls
    below ``tol`` times the largest such pivot seen so far; earlier columns
    always win. Returns (Q, kept mask).
    """
    n, p = A.shape
    Q = np.empty((n, 0))
    kept = np.zeros(p, dtype=bool)
    top = 0.0
    for j in range(p):
        a = A[:, j]
        norm = np.linalg.norm(a)
        if norm == 0:
            continue
        v = a / norm
        for _ in range(2):
            v = v - Q @ (Q.T @ v)
        pivot = np.linalg.norm(v)
        if pivot < tol * max(top, pivot) or pivot < tol:
            continue
        top = max(top, pivot)
        Q = np.column_stack([Q, v / pivot])
        kept[j] = True
    return Q, kept


def independent_columns(X, w, tol: float = RANK_TOL) -> np.ndarray:
    """Mask of columns kept after dropping weighted near-collinear ones (first come, first kept)."""
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return _orthonormal_basis(np.sqrt(w)[:, None] * X, tol)[1]


@dataclass
class LinearFit:
    weights: np.ndarray
    kept: np.ndarray
    coef: np.ndarray


def linear_fit(w, X, t_x, tol: float = RANK_TOL) -> LinearFit:
    """Calibrated weights w_j [1 + (t_x - t_x_ht)' (sum w x x')^{-1} x_j].

    Columns that are collinear in the weighted sample are dropped before
    solving; their totals are then not calibrated.
    """
    w = np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    t_x = np.asarray(t_x, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != w.shape[0] or X.shape[1] != t_x.shape[0]:
        raise LengthMismatch("design matrix, weights and totals are not aligned")
    if np.any(~(w > 0)):
        raise NonpositiveWeight("all design weights must be positive")
    kept = independent_columns(X, w, tol)
    if not kept.any():
        raise SingularSystem("no usable column in the design matrix")
    Xk = X[:, kept]
    R = np.linalg.qr(np.sqrt(w)[:, None] * Xk, mode="r")
    if not np.all(np.isfinite(R)) or np.any(np.abs(np.diag(R)) == 0):
        raise SingularSystem("weighted cross-product matrix is singular")
    t_ht = np.array([math.fsum(w * Xk[:, j]) for j in range(Xk.shape[1])])
    d = t_x[kept] - t_ht
    lam = solve_triangular(R, solve_triangular(R, d, trans="T"))
    return LinearFit(weights=w * (1.0 + Xk @ lam), kept=kept, coef=lam)


def linear_weights(w, X, t_x, tol: float = RANK_TOL) -> np.ndarray:
    return linear_fit(w, X, t_x, tol).weights


def _block_columns(frame: Frame, name: str, codes_or_values: Mapping[str, np.ndarray]):
    """Columns of one model term; ``a:b`` is the full cross-classification of a and b."""
    if ":" in name:
        a, b = name.split(":")
        sa, sb = frame.spec(a), frame.spec(b)
        if not (sa.is_categorical and sb.is_categorical):
            raise UnknownVariable(f"interaction {name!r} needs categorical variables")
        cell = codes_or_values[a] * len(sb.levels) + codes_or_values[b]
        cols = np.arange(len(sa.levels) * len(sb.levels))
        return (cell[:, None] == cols[None, :]).astype(np.float64)
    spec = frame.spec(name)
    if spec.is_categorical:
        # treatment coding: the first level is absorbed by the intercept
        return (codes_or_values[name][:, None] == np.arange(1, len(spec.levels))[None, :]).astype(np.float64)
    return np.asarray(codes_or_values[name], dtype=np.float64)[:, None]


def design_matrix(frame: Frame, terms: Sequence[str], rows=None, intercept: bool = True) -> np.ndarray:
    """Model matrix for the given terms, over ``rows`` (default: every frame row)."""
    names = {t for term in terms for t in term.split(":")}
    cols = {n: frame.column(n) if rows is None else frame.column(n)[rows] for n in names}
    n = frame.N if rows is None else len(rows)
    blocks = [np.ones((n, 1))] if intercept else []
    blocks += [_block_columns(frame, t, cols) for t in terms]
    return np.hstack(blocks) if blocks else np.empty((n, 0))


def population_totals(frame: Frame, terms: Sequence[str], intercept: bool = True) -> np.ndarray:
    """Frame totals of the model matrix columns, via distinct predictor patterns."""
    pats = frame.patterns
    names = {t for term in terms for t in term.split(":")}
    if all(n in pats.columns for n in names):
        cols = {n: pats.columns[n] for n in names}
        n = len(pats)
        blocks = [np.ones((n, 1))] if intercept else []
        blocks += [_block_columns(frame, t, cols) for t in terms]
        X = np.hstack(blocks) if blocks else np.empty((n, 0))
        weights = pats.counts.astype(np.float64)
    else:
        X = design_matrix(frame, terms, intercept=intercept)
        weights = np.ones(frame.N)
    return np.array([math.fsum(weights * X[:, j]) for j in range(X.shape[1])])


@dataclass(frozen=True)
class StepwiseControls:
    penalty: float = 2.0
    max_steps: int | None = None
    interactions: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _weighted_rss(y, w, X) -> tuple[float, int]:
    sw = np.sqrt(w)
    Q, kept = _orthonormal_basis(sw[:, None] * X)
    z = sw * y
    r = z - Q @ (Q.T @ z)
    return math.fsum(r * r), int(kept.sum())


def stepwise_select(frame: Frame, sample, study: str, candidates: Sequence[str] | None = None,
                    controls: StepwiseControls = StepwiseControls()) -> list[str]:
    """Forward selection of model terms by penalized weighted RSS.

    Criterion: n log(RSS_w) + penalty * (number of estimable coefficients),
    starting from the intercept-only model. Categorical variables enter as
    whole indicator blocks. Ties go to the earlier candidate.
    """
    y, w = _sample_y(sample, frame, study)
    if candidates is None:
        candidates = [s.name for s in frame.predictors]
    terms = list(candidates)
    if controls.interactions:
        cats = [c for c in candidates if frame.spec(c).is_categorical]
        terms += [f"{a}:{b}" for i, a in enumerate(cats) for b in cats[i + 1:]]
    n = y.size
    rows = sample.indices
    blocks = {t: design_matrix(frame, [t], rows, intercept=False) for t in terms}
    current = np.ones((n, 1))
    rss, p = _weighted_rss(y, w, current)
    floor = 1e-12 * math.fsum(w * y * y)

    def crit(rss, p):
        return n * math.log(rss) + controls.penalty * p

    selected: list[str] = []
    while rss > floor and (controls.max_steps is None or len(selected) < controls.max_steps):
        best = None
        for t in terms:
            if t in selected:
                continue
            X = np.hstack([current, blocks[t]])
            r, k = _weighted_rss(y, w, X)
            c = crit(max(r, floor), k)
            if best is None or c < best[0]:
                best = (c, t, X, r, k)
        if best is None or not best[0] < crit(rss, p):
            break
        _, t, current, rss, p = best
        selected.append(t)
    return selected


def linear_estimator(sample, frame: Frame, study: str, terms: Sequence[str]) -> EstimateResult:
    """Linear GREG total calibrated on an intercept plus every level of the given terms."""
    y, w = _sample_y(sample, frame, study)
    X = design_matrix(frame, terms, sample.indices)
    fit = linear_fit(w, X, population_totals(frame, terms))
    return EstimateResult(
        total=math.fsum(fit.weights * y),
        estimator_kind=GREG_LINEAR,
        model_summary={"terms": list(terms), "parameters": int(fit.kept.sum()),
                       "dropped_columns": int((~fit.kept).sum())},
        calibration_weights=fit.weights,
    )


# --------------------------------------------------------------------------
# regression tree estimator


@dataclass
class _BoxSums:
    leaf_s: np.ndarray
    leaf_U: np.ndarray
    N_k: np.ndarray
    Nhat_k: np.ndarray
    mu: np.ndarray


def _box_sums(sample, frame: Frame, partition: Partition, y, w) -> _BoxSums:
    leaf_U = partition.classify_frame(frame)
    leaf_s = leaf_U[sample.indices]
    q = partition.q
    N_k = np.bincount(leaf_U, minlength=q)
    order = np.argsort(leaf_s, kind="stable")
    bounds = np.searchsorted(leaf_s[order], np.arange(q + 1))
    Nhat = np.zeros(q)
    mu = np.zeros(q)
    for k in range(q):
        idx = order[bounds[k]:bounds[k + 1]]
        if idx.size == 0:
            if N_k[k] > 0:
                raise EmptySampleBox(f"box {k} has {N_k[k]} population units but no sampled unit")
            continue
        Nhat[k] = math.fsum(w[idx])
        mu[k] = math.fsum(w[idx] * y[idx]) / Nhat[k]
    return _BoxSums(leaf_s, leaf_U, N_k, Nhat, mu)


def calibration_weights(partition: Partition, sample, frame: Frame) -> np.ndarray:
    """w_j N_k / Nhat_k for unit j in box k: reproduces every box count N_k."""
    w = np.asarray(sample.weights, dtype=np.float64)
    b = _box_sums(sample, frame, partition, np.zeros_like(w), w)
    ratio = np.divide(b.N_k, b.Nhat_k, out=np.zeros(len(b.N_k)), where=b.Nhat_k > 0)
    return w * ratio[b.leaf_s]


def tree_estimator(sample, frame: Frame, partition: Partition, study: str | None = None,
                   rtol: float = 1e-8) -> EstimateResult:
    """Regression tree estimator of the total of ``study``.

    Box means are recomputed from ``sample`` (Hajek means). The total is
    computed twice: as sum_k N_k mu_k over exact box counts, and as a GREG
    estimator summing per-unit predictions over the frame. The two must agree
    to ``rtol`` (relative to the magnitude of the terms involved), otherwise
    IdentityViolation is raised.
    """
    study = study or partition.study
    if study is None:
        raise UnknownVariable("no study variable given")
    y, w = _sample_y(sample, frame, study)
    b = _box_sums(sample, frame, partition, y, w)
    post = math.fsum(b.N_k * b.mu)
    greg = math.fsum(w * (y - b.mu[b.leaf_s])) + float(np.sum(b.mu[b.leaf_U]))
    scale = math.fsum(np.abs(b.N_k * b.mu)) + math.fsum(w * np.abs(y))
    if abs(post - greg) > rtol * max(abs(post), scale, 1e-300):
        raise IdentityViolation(f"post-stratified total {post!r} differs from GREG form {greg!r}")
    ratio = np.divide(b.N_k, b.Nhat_k, out=np.zeros(len(b.N_k)), where=b.Nhat_k > 0)
    return EstimateResult(
        total=post,
        estimator_kind=GREG_TREE,
        model_summary={"boxes": partition.q, "greg_form": greg},
        calibration_weights=w * ratio[b.leaf_s],
    )


def ht_estimator(sample, frame: Frame, study: str) -> EstimateResult:
    y, w = _sample_y(sample, frame, study)
    return EstimateResult(total=ht_total(y, w), estimator_kind=HT, model_summary={}, calibration_weights=w.copy())
