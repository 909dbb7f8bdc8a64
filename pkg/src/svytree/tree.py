"""Survey-weighted regression trees.

Splits maximize the reduction in design-weighted squared error; each leaf
("box") predicts the Hajek mean of the sampled units it contains.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import EmptyNode, EmptySample, TreeFormatError, UnknownVariable
from .frame import CATEGORICAL, Frame, VariableSpec

FORMAT = "svytree-tree-1"


@dataclass(frozen=True)
class GrowControls:
    min_node: int = 25
    min_improve: float = 0.001
    max_depth: int = 8
    exhaustive_cutoff: int = 12

    def __post_init__(self):
        if self.min_node < 2:
            raise ValueError("min_node must be at least 2")
        if not self.min_improve >= 0:
            raise ValueError("min_improve must be nonnegative")
        if self.max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        if self.exhaustive_cutoff < 0:
            raise ValueError("exhaustive_cutoff must be nonnegative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SplitRule:
    """``variable`` in ``left`` (categorical) or ``variable <= threshold`` (numeric) goes left."""

    variable: str
    left: frozenset | None = None
    threshold: float | None = None

    def __post_init__(self):
        if (self.left is None) == (self.threshold is None):
            raise ValueError("a rule is either categorical or numeric")
        if self.left is not None:
            object.__setattr__(self, "left", frozenset(str(v) for v in self.left))

    @property
    def is_categorical(self) -> bool:
        return self.left is not None

    def goes_left(self, value) -> bool:
        if self.is_categorical:
            return str(value) in self.left
        return float(value) <= self.threshold


@dataclass(frozen=True)
class Split:
    rule: SplitRule
    reduction: float


@dataclass
class Node:
    path: str = ""
    value: float | None = None
    weighted_count: float | None = None
    sample_count: int | None = None
    sse: float | None = None
    rule: SplitRule | None = None
    reduction: float | None = None
    left: "Node | None" = None
    right: "Node | None" = None
    label: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.rule is None

    def walk(self) -> Iterator["Node"]:
        yield self
        if not self.is_leaf:
            yield from self.left.walk()
            yield from self.right.walk()


@dataclass(frozen=True)
class Box:
    path: str
    rule_path: tuple
    mu: float
    weighted_count: float | None
    sample_count: int | None
    sse: float | None

    def contains(self, x: Mapping) -> bool:
        return all(rule.goes_left(x[rule.variable]) == (side == "L") for rule, side in self.rule_path)


def weighted_node_mean(y, w) -> float:
    """Hajek mean sum(w y) / sum(w) with compensated sums."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if y.size == 0:
        raise EmptyNode("cannot average an empty node")
    if y.shape != w.shape:
        raise ValueError("y and w differ in length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return math.fsum(w * y) / math.fsum(w)


def weighted_sse(y, w, mu: float | None = None) -> float:
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if mu is None:
        mu = weighted_node_mean(y, w)
    return math.fsum(w * (y - mu) ** 2)


# --------------------------------------------------------------------------
# split search


class _LevelStats:
    """Per-level raw counts, weight totals and corrected Hajek means at a node."""

    def __init__(self, codes, y, w, n_levels):
        cnt = np.bincount(codes, minlength=n_levels)
        W = np.bincount(codes, weights=w, minlength=n_levels)
        obs = cnt > 0
        M = np.zeros(n_levels)
        M[obs] = np.bincount(codes, weights=w * y, minlength=n_levels)[obs] / W[obs]
        # one refinement pass recovers digits lost in the plain weighted sums
        M[obs] += np.bincount(codes, weights=w * (y - M[codes]), minlength=n_levels)[obs] / W[obs]
        self.observed = np.flatnonzero(obs)
        self.cnt, self.W, self.M, self.S = cnt, W, M, W * M

    def reduction(self, A, B) -> float:
        """Weighted SSE reduction of the bipartition (A, B); symmetric and order-free."""
        WA = math.fsum(self.W[A])
        WB = math.fsum(self.W[B])
        d = math.fsum(self.S[A]) / WA - math.fsum(self.S[B]) / WB
        return WA * WB / (WA + WB) * (d * d)


def _admissible(cA, cB, WA, WB, min_node):
    n = cA + cB
    W = WA + WB
    return (cA >= min_node) & (cB >= min_node) & (WA * n >= min_node * W) & (WB * n >= min_node * W)


def _categorical_split(codes, y, w, spec: VariableSpec, controls: GrowControls, exhaustive: bool | None = None):
    st = _LevelStats(codes, y, w, len(spec.levels))
    obs = st.observed
    L = len(obs)
    if L < 2:
        return None
    if exhaustive is None:
        exhaustive = L <= controls.exhaustive_cutoff
    if exhaustive:
        # left side always holds the first observed level: 2^(L-1) - 1 bipartitions
        m = np.arange(2 ** (L - 1) - 1)
        bits = ((m[:, None] >> np.arange(L - 1)[None, :]) & 1).astype(bool)
        masks = np.column_stack([np.ones(len(m), dtype=bool), bits])
    else:
        order = obs[np.lexsort((obs, st.M[obs]))]
        rank = np.empty(len(spec.levels), dtype=np.int64)
        rank[order] = np.arange(L)
        cuts = np.arange(1, L)
        masks = rank[obs][None, :] < cuts[:, None]
        # orient so the first observed level is on the left
        masks = np.where(masks[:, :1], masks, ~masks)
    cnt, W, S = st.cnt[obs], st.W[obs], st.S[obs]
    cA, WA, SA = masks @ cnt, masks @ W, masks @ S
    cB, WB, SB = cnt.sum() - cA, W.sum() - WA, S.sum() - SA
    ok = _admissible(cA, cB, WA, WB, controls.min_node)
    if not ok.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        approx = WA * WB / (WA + WB) * (SA / WA - SB / WB) ** 2
    approx = np.where(ok, approx, -np.inf)
    top = approx.max()
    # exact evaluation for every candidate within rounding of the best
    near = np.flatnonzero(approx >= top - 1e-9 * abs(top) - 1e-300)
    best = None
    for i in near:
        A, B = obs[masks[i]], obs[~masks[i]]
        red = st.reduction(A, B)
        key = (-red, tuple(A.tolist()))
        if best is None or key < best[0]:
            best = (key, A)
    red = -best[0][0]
    return Split(SplitRule(spec.name, left=frozenset(spec.levels[i] for i in best[1])), red)


def _numeric_split(x, y, w, spec: VariableSpec, controls: GrowControls):
    u, inv = np.unique(x, return_inverse=True)
    if len(u) < 2:
        return None
    ybar = math.fsum(w * y) / math.fsum(w)
    cnt = np.bincount(inv, minlength=len(u))
    W = np.bincount(inv, weights=w, minlength=len(u))
    S = np.bincount(inv, weights=w * (y - ybar), minlength=len(u))
    cA, WA, SA = np.cumsum(cnt)[:-1], np.cumsum(W)[:-1], np.cumsum(S)[:-1]
    Wt, St = W.sum(), S.sum()
    cB, WB, SB = cnt.sum() - cA, Wt - WA, St - SA
    ok = _admissible(cA, cB, WA, WB, controls.min_node)
    if not ok.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        red = WA * WB / (WA + WB) * (SA / WA - SB / WB) ** 2
    red = np.where(ok, red, -np.inf)
    g = int(np.argmax(red))
    return Split(SplitRule(spec.name, threshold=float((u[g] + u[g + 1]) / 2)), float(red[g]))


def best_split(y, w, columns: Sequence[tuple[VariableSpec, np.ndarray]], controls: GrowControls = GrowControls(),
               root_sse: float | None = None, exhaustive: bool | None = None) -> Split | None:
    """Best admissible split of one node, or None.

    ``columns`` pairs each predictor spec with its node values (level codes
    for categorical predictors). Candidates are compared by reduction; ties go
    to the earlier predictor, then the smaller left subset or threshold. A
    split is only returned if its reduction is positive and at least
    ``min_improve * root_sse`` (the node's own SSE when ``root_sse`` is None).
    ``exhaustive`` forces (True) or forbids (False) full bipartition
    enumeration for categorical predictors; None applies the cutoff.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if y.size == 0:
        raise EmptyNode("empty node")
    if np.all(y == y[0]):
        return None
    if root_sse is None:
        root_sse = weighted_sse(y, w)
    best = None
    for spec, values in columns:
        if spec.kind == CATEGORICAL:
            cand = _categorical_split(np.asarray(values, dtype=np.int64), y, w, spec, controls, exhaustive)
        else:
            cand = _numeric_split(np.asarray(values, dtype=np.float64), y, w, spec, controls)
        if cand is not None and (best is None or cand.reduction > best.reduction):
            best = cand
    if best is None or not best.reduction > 0 or best.reduction < controls.min_improve * root_sse:
        return None
    return best


# --------------------------------------------------------------------------
# partitions


class Partition:
    """A grown (or imported) tree over a fixed predictor schema."""

    def __init__(self, schema: Sequence[VariableSpec], root: Node, controls: GrowControls | None = None,
                 study: str | None = None):
        self.schema = tuple(schema)
        self.root = root
        self.controls = controls
        self.study = study
        self._specs = {s.name: s for s in self.schema}
        self._validate()

    def spec(self, name: str) -> VariableSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownVariable(f"tree has no predictor {name!r}") from None

    def _validate(self):
        def visit(node: Node, remaining: dict):
            if node.is_leaf:
                if node.value is None or not math.isfinite(node.value):
                    raise TreeFormatError(f"leaf {node.path!r} has no finite value")
                return
            rule = node.rule
            spec = self.spec(rule.variable)
            if rule.is_categorical:
                if not spec.is_categorical:
                    raise TreeFormatError(f"{rule.variable}: categorical rule on numeric variable")
                for v in rule.left:
                    spec.code_of(v)
                rem = remaining[rule.variable]
                if not rule.left <= rem or not rule.left or rule.left == rem:
                    raise TreeFormatError(
                        f"node {node.path!r}: left levels must be a proper nonempty subset of {sorted(rem)}")
                lrem = dict(remaining, **{rule.variable: rem & rule.left})
                rrem = dict(remaining, **{rule.variable: rem - rule.left})
            else:
                if spec.is_categorical:
                    raise TreeFormatError(f"{rule.variable}: threshold rule on categorical variable")
                lrem = rrem = remaining
            if node.left is None or node.right is None:
                raise TreeFormatError(f"node {node.path!r} lacks a child")
            visit(node.left, lrem)
            visit(node.right, rrem)

        visit(self.root, {s.name: frozenset(s.levels) for s in self.schema if s.is_categorical})

    # structure ------------------------------------------------------------
    def leaves(self) -> list[Node]:
        return [n for n in self.root.walk() if n.is_leaf]

    @property
    def boxes(self) -> list[Box]:
        out = []

        def visit(node, path):
            if node.is_leaf:
                out.append(Box(node.path, tuple(path), node.value, node.weighted_count, node.sample_count, node.sse))
                return
            visit(node.left, path + [(node.rule, "L")])
            visit(node.right, path + [(node.rule, "R")])

        visit(self.root, [])
        return out

    @property
    def q(self) -> int:
        return len(self.leaves())

    @property
    def values(self) -> np.ndarray:
        return np.array([n.value for n in self.leaves()], dtype=np.float64)

    def remaining_levels(self) -> dict[str, dict[str, frozenset]]:
        """Levels of each categorical variable still reachable at every node path."""
        out = {}

        def visit(node, rem):
            out[node.path] = rem
            if node.is_leaf:
                return
            r = node.rule
            if r.is_categorical:
                visit(node.left, dict(rem, **{r.variable: rem[r.variable] & r.left}))
                visit(node.right, dict(rem, **{r.variable: rem[r.variable] - r.left}))
            else:
                visit(node.left, rem)
                visit(node.right, rem)

        visit(self.root, {s.name: frozenset(s.levels) for s in self.schema if s.is_categorical})
        return out

    # classification -------------------------------------------------------
    def leaf_index(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Leaf number (position in ``leaves()``) for each row of coded columns.

        Categorical columns hold level codes of this tree's schema.
        """
        n = len(next(iter(columns.values()))) if columns else 0
        out = np.full(n, -1, dtype=np.int64)
        leaf_no = {id(node): i for i, node in enumerate(self.leaves())}

        def visit(node, rows):
            if rows.size == 0:
                return
            if node.is_leaf:
                out[rows] = leaf_no[id(node)]
                return
            r = node.rule
            if r.variable not in columns:
                raise UnknownVariable(f"data lacks predictor {r.variable!r}")
            vals = np.asarray(columns[r.variable])[rows]
            if r.is_categorical:
                spec = self.spec(r.variable)
                lut = np.zeros(len(spec.levels), dtype=bool)
                lut[[spec.code_of(v) for v in r.left]] = True
                go = lut[vals]
            else:
                go = vals <= r.threshold
            visit(node.left, rows[go])
            visit(node.right, rows[~go])

        visit(self.root, np.arange(n))
        return out

    def _frame_columns(self, frame: Frame) -> dict[str, np.ndarray]:
        cols = {}
        for s in self.schema:
            if s.name not in {x.name for x in frame.specs}:
                continue
            fs = frame.spec(s.name)
            if fs.kind != s.kind:
                raise TreeFormatError(f"{s.name}: frame and tree disagree on kind")
            col = frame.column(s.name)
            if s.is_categorical and fs.levels != s.levels:
                remap = np.array([s.code_of(v) for v in fs.levels], dtype=np.int64)
                col = remap[col]
            cols[s.name] = col
        return cols

    def classify_frame(self, frame: Frame) -> np.ndarray:
        """Leaf number of every frame row."""
        pats = frame.patterns
        return self.classify_patterns(frame)[pats.inverse]

    def classify_patterns(self, frame: Frame) -> np.ndarray:
        pats = frame.patterns
        cols = {}
        for s in self.schema:
            if s.name in pats.columns:
                fs = frame.spec(s.name)
                col = pats.columns[s.name]
                if s.is_categorical and fs.levels != s.levels:
                    col = np.array([s.code_of(v) for v in fs.levels], dtype=np.int64)[col]
                cols[s.name] = col
        return self.leaf_index(cols)

    def box_counts(self, frame: Frame) -> np.ndarray:
        """Exact population count N_k of every box."""
        leaf = self.classify_patterns(frame)
        return np.bincount(leaf, weights=frame.patterns.counts, minlength=self.q).astype(np.int64)

    def predict_frame(self, frame: Frame) -> np.ndarray:
        return self.values[self.classify_frame(frame)]

    def predict(self, x: Mapping[str, object]) -> float:
        """Leaf mean for one predictor record (labels for categorical variables)."""
        for k, v in x.items():
            spec = self._specs.get(k)
            if spec is not None and spec.is_categorical:
                spec.code_of(v)
        node = self.root
        while not node.is_leaf:
            r = node.rule
            if r.variable not in x:
                raise UnknownVariable(f"record lacks predictor {r.variable!r}")
            node = node.left if r.goes_left(x[r.variable]) else node.right
        return float(node.value)

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        remaining = self.remaining_levels()
        nodes = []
        for node in self.root.walk():
            d = {"path": node.path, "value": node.value, "weighted_count": node.weighted_count}
            for key in ("sample_count", "sse", "reduction", "label"):
                v = getattr(node, key)
                if v is not None:
                    d[key] = v
            if node.is_leaf:
                d["rule"] = None
            elif node.rule.is_categorical:
                spec = self.spec(node.rule.variable)
                rem = remaining[node.path][spec.name]
                d["rule"] = {
                    "variable": spec.name,
                    "left": [v for v in spec.levels if v in node.rule.left],
                    "right": [v for v in spec.levels if v in rem and v not in node.rule.left],
                }
            else:
                d["rule"] = {"variable": node.rule.variable, "threshold": node.rule.threshold}
            nodes.append(d)
        return {
            "format": FORMAT,
            "study": self.study,
            "schema": [s.to_dict() for s in self.schema],
            "controls": self.controls.to_dict() if self.controls else None,
            "nodes": nodes,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Partition":
        if doc.get("format", FORMAT) != FORMAT:
            raise TreeFormatError(f"unsupported tree format {doc.get('format')!r}")
        try:
            schema = [VariableSpec.from_dict(s) for s in doc["schema"]]
            by_path = {}
            for d in doc["nodes"]:
                rule = None
                if d.get("rule"):
                    r = d["rule"]
                    if "threshold" in r:
                        rule = SplitRule(r["variable"], threshold=float(r["threshold"]))
                    else:
                        rule = SplitRule(r["variable"], left=frozenset(str(v) for v in r["left"]))
                path = str(d["path"])
                if path in by_path or any(c not in "LR" for c in path):
                    raise TreeFormatError(f"bad or duplicate node path {path!r}")
                by_path[path] = (d, rule)
        except (KeyError, TypeError) as exc:
            raise TreeFormatError(f"malformed tree document: {exc}") from None

        def build(path):
            if path not in by_path:
                raise TreeFormatError(f"missing node {path!r}")
            d, rule = by_path[path]
            node = Node(path=path, value=_opt_float(d.get("value")), weighted_count=_opt_float(d.get("weighted_count")),
                        sample_count=d.get("sample_count"), sse=_opt_float(d.get("sse")), rule=rule,
                        reduction=_opt_float(d.get("reduction")), label=d.get("label"))
            if rule is not None:
                node.left, node.right = build(path + "L"), build(path + "R")
                if rule.is_categorical and "right" in d["rule"]:
                    d_right = frozenset(str(v) for v in d["rule"]["right"])
                    node._declared_right = d_right
            return node

        root = build("")
        if len(list(root.walk())) != len(by_path):
            raise TreeFormatError("document has unreachable nodes")
        controls = GrowControls(**doc["controls"]) if doc.get("controls") else None
        part = cls(schema, root, controls, doc.get("study"))
        remaining = part.remaining_levels()
        for node in root.walk():
            declared = getattr(node, "_declared_right", None)
            if declared is not None:
                rem = remaining[node.path][node.rule.variable]
                if declared != rem - node.rule.left:
                    raise TreeFormatError(f"node {node.path!r}: left and right levels do not cover "
                                          f"{sorted(rem)} exactly")
                del node._declared_right
        return part


def _opt_float(v):
    return None if v is None else float(v)


def export_tree(partition: Partition) -> str:
    """Serialize a partition as a deterministic JSON document."""
    return json.dumps(partition.to_dict(), indent=2, sort_keys=True) + "\n"


def import_tree(text: str) -> Partition:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeFormatError(f"tree document is not JSON: {exc}") from None
    return Partition.from_dict(doc)


def load_tree(path) -> Partition:
    with open(path, encoding="utf-8") as fh:
        return import_tree(fh.read())


# --------------------------------------------------------------------------
# growing


def grow_tree(frame: Frame, sample, predictors: Sequence[str] | None = None, study: str | None = None,
              controls: GrowControls = GrowControls()) -> Partition:
    """Grow a survey-weighted regression tree on a sample from ``frame``.

    ``sample`` is a SampleDraw (anything with ``indices`` and ``weights``).
    """
    if sample.n == 0:
        raise EmptySample("cannot grow a tree on an empty sample")
    if study is None:
        study = frame.studies[0].name
    if frame.spec(study).role != "study":
        raise UnknownVariable(f"{study!r} is not a study variable")
    names = [s.name for s in frame.predictors] if predictors is None else list(predictors)
    specs = [frame.spec(n) for n in names]
    rows = sample.indices
    y = frame.column(study)[rows]
    w = np.asarray(sample.weights, dtype=np.float64)
    cols = [frame.column(n)[rows] for n in names]
    return grow_from_arrays(y, w, list(zip(specs, cols)), controls, study)


def grow_from_arrays(y, w, columns: Sequence[tuple[VariableSpec, np.ndarray]],
                     controls: GrowControls = GrowControls(), study: str | None = None) -> Partition:
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if y.size == 0:
        raise EmptySample("cannot grow a tree on an empty sample")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    specs = [s for s, _ in columns]
    values = [np.asarray(v) for _, v in columns]
    root_mu = weighted_node_mean(y, w)
    root_sse = weighted_sse(y, w, root_mu)

    def make(rows, path, depth):
        yy, ww = y[rows], w[rows]
        mu = weighted_node_mean(yy, ww)
        node = Node(path=path, value=mu, weighted_count=math.fsum(ww), sample_count=int(rows.size),
                    sse=weighted_sse(yy, ww, mu))
        if depth >= controls.max_depth or rows.size < 2 * controls.min_node:
            return node
        split = best_split(yy, ww, [(s, v[rows]) for s, v in zip(specs, values)], controls, root_sse)
        if split is None:
            return node
        k = specs.index(next(s for s in specs if s.name == split.rule.variable))
        v = values[k][rows]
        if split.rule.is_categorical:
            lut = np.zeros(len(specs[k].levels), dtype=bool)
            lut[[specs[k].code_of(l) for l in split.rule.left]] = True
            go = lut[v]
        else:
            go = v <= split.rule.threshold
        node.rule, node.reduction = split.rule, split.reduction
        node.left = make(rows[go], path + "L", depth + 1)
        node.right = make(rows[~go], path + "R", depth + 1)
        return node

    root = make(np.arange(y.size), "", 0)
    return Partition(specs, root, controls, study)


def synth_config_from_tree(partition: Partition, study: str | None = None, N: int = 10_000, seed: int = 0):
    """A synthetic population whose cell means are the tree's leaf values.

    Predictors reuse the default marginals when their level sets match them
    and are uniform otherwise.
    """
    from .frame import CellMean, PredictorModel, StudyModel, SynthConfig, default_predictors

    defaults = {p.name: p for p in default_predictors()}
    preds = []
    for s in partition.schema:
        if not s.is_categorical:
            raise TreeFormatError(f"cannot synthesize numeric predictor {s.name!r}")
        d = defaults.get(s.name)
        if d is not None and d.levels == s.levels:
            preds.append(d)
        else:
            preds.append(PredictorModel(s.name, s.levels, (1.0,) * len(s.levels)))
    remaining = partition.remaining_levels()
    cells = []
    for leaf in partition.leaves():
        rem = remaining[leaf.path]
        where = {s.name: rem[s.name] for s in partition.schema if rem[s.name] != frozenset(s.levels)}
        cells.append(CellMean(where, float(leaf.value)))
    name = study or partition.study or "y"
    return SynthConfig(N=N, seed=seed, studies=(StudyModel(name, tuple(cells), default_mean=0.0),),
                       predictors=tuple(preds))
