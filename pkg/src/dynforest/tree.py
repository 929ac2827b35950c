"""One survival tree whose marker split candidates are node-level BLUPs.

At every node a random subset of predictors is drawn.  Fixed covariates are
used as they are; each drawn marker gets a mixed model fitted on the node's
subjects (warm-started from the closest ancestor's fit) and its predicted
random effects become candidate split features.  Continuous features are cut
at node-local deciles, categorical ones by level subsets, and candidates are
scored by the log-rank statistic (one cause) or Gray's test (several causes).
Leaves hold an Aalen-Johansen estimate of the cumulative incidences.

Node ids follow the heap convention: root 1, children ``2d`` (left,
``w <= c`` or level in the subset) and ``2d + 1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import LmmFitError, ModelFormatError
from .mixed import LmmSpec, MarkerStats, MixedModelFit, blup_from_stats, fit_lmm
from .survival import CifCurve, _EventGrid, _gray_many, _logrank_many, aalen_johansen

log = logging.getLogger(__name__)

DECILES = np.linspace(0.1, 0.9, 9)


@dataclass(frozen=True)
class TreeParams:
    mtry: int
    minsplit: int = 5
    nodesize: int = 3
    cause: int = 1
    q_min: int = 10
    max_levels: int = 10

    def __post_init__(self):
        if self.mtry < 1 or self.minsplit < 1 or self.nodesize < 1 or self.cause < 1:
            raise ValueError("mtry, minsplit, nodesize and cause must all be >= 1")


class TreeData:
    """Training or prediction arrays in the layout the tree code consumes.

    ``X`` holds the P fixed covariates (categorical as integer codes) and
    ``stats`` one :class:`MarkerStats` per marker, built with ``specs``.
    """

    def __init__(self, X, categorical, stats, specs, times=None, causes=None, n_causes=1):
        self.X = np.asarray(X, float)
        self.categorical = np.asarray(categorical, bool)
        self.stats = tuple(stats)
        self.specs = tuple(specs)
        self.times = None if times is None else np.asarray(times, float)
        self.causes = None if causes is None else np.asarray(causes, np.int64)
        self.n_causes = int(n_causes)

    @classmethod
    def from_dataset(cls, ds, specs, X=None, categorical=None):
        X = ds.X if X is None else X
        if categorical is None:
            categorical = [c.is_categorical for c in ds.schema.covariates]
        stats = [MarkerStats.from_table(tab, spec) for tab, spec in zip(ds.markers, specs)]
        return cls(X, categorical, stats, specs, ds.event_time, ds.cause, ds.n_causes)

    @property
    def n_subjects(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_markers(self) -> int:
        return len(self.stats)

    @property
    def n_predictors(self) -> int:
        return self.n_covariates + self.n_markers


@dataclass(eq=False)
class Node:
    node_id: int
    n_subjects: int
    n_events: int
    feature: tuple[int, int] | None = None      # (predictor, component)
    threshold: float | None = None
    left_levels: tuple[int, ...] | None = None
    right_levels: tuple[int, ...] | None = None
    n_left: int = 0
    n_right: int = 0
    statistic: float | None = None
    lmm: dict = field(default_factory=dict)     # marker index -> MixedModelFit
    cif: CifCurve | None = None
    candidates: np.ndarray | None = None        # debug: all admissible statistics

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        d = {"id": self.node_id, "n": self.n_subjects, "events": self.n_events,
             "lmm": {str(m): f.to_dict() for m, f in sorted(self.lmm.items())}}
        if self.is_leaf:
            d["cif"] = self.cif.to_dict()
        else:
            d.update(feature=list(self.feature), statistic=float(self.statistic),
                     n_left=self.n_left, n_right=self.n_right)
            if self.left_levels is not None:
                d["left_levels"] = list(self.left_levels)
                d["right_levels"] = list(self.right_levels)
            else:
                d["threshold"] = float(self.threshold)
        return d

    @classmethod
    def from_dict(cls, d: dict, n_causes: int) -> "Node":
        node = cls(int(d["id"]), int(d["n"]), int(d["events"]),
                   lmm={int(m): MixedModelFit.from_dict(f) for m, f in d.get("lmm", {}).items()})
        if "cif" in d:
            node.cif = CifCurve.from_dict(d["cif"], n_causes)
        else:
            node.feature = (int(d["feature"][0]), int(d["feature"][1]))
            node.statistic = float(d["statistic"])
            node.n_left, node.n_right = int(d["n_left"]), int(d["n_right"])
            if "left_levels" in d:
                node.left_levels = tuple(int(v) for v in d["left_levels"])
                node.right_levels = tuple(int(v) for v in d["right_levels"])
            else:
                node.threshold = float(d["threshold"])
        return node


def node_depth(node_id: int) -> int:
    """Depth with the root at 1."""
    return int(node_id).bit_length()


class SurvivalTree:
    def __init__(self, nodes: dict, n_covariates: int, n_markers: int, n_causes: int):
        self.nodes = nodes
        self.n_covariates = n_covariates
        self.n_markers = n_markers
        self.n_causes = n_causes

    @property
    def leaves(self) -> list[int]:
        return sorted(k for k, n in self.nodes.items() if n.is_leaf)

    def split_nodes(self):
        return [self.nodes[k] for k in sorted(self.nodes) if not self.nodes[k].is_leaf]

    def used_predictors(self) -> set[int]:
        return {n.feature[0] for n in self.split_nodes()}

    def apply(self, data: TreeData, rows=None) -> np.ndarray:
        """Leaf id reached by each of ``rows`` (default: all subjects)."""
        rows = np.arange(data.n_subjects) if rows is None else np.asarray(rows, np.int64)
        out = np.zeros(rows.size, dtype=np.int64)
        stack = [(1, np.arange(rows.size))]
        P = self.n_covariates
        while stack:
            nid, pos = stack.pop()
            node = self.nodes[nid]
            if node.is_leaf:
                out[pos] = nid
                continue
            if pos.size == 0:
                continue
            p, r = node.feature
            sub = rows[pos]
            if p < P:
                w = data.X[sub, p]
            else:
                w = blup_from_stats(node.lmm[p - P], data.stats[p - P].take(sub))[:, r]
            if node.left_levels is not None:
                left = np.isin(w, node.left_levels)
                unknown = ~left & ~np.isin(w, node.right_levels)
                if unknown.any():
                    log.info("unseen level at node %d routed to the larger side", nid)
                    left[unknown] = node.n_left >= node.n_right
            else:
                left = w <= node.threshold
            stack.append((2 * nid + 1, pos[~left]))
            stack.append((2 * nid, pos[left]))
        return out

    def leaf_cif_table(self, times) -> tuple[dict, np.ndarray]:
        """Leaf id -> row index, and leaf CIFs at ``times`` with shape (L, T, K)."""
        leaves = self.leaves
        table = np.stack([self.nodes[k].cif(times) for k in leaves])
        return {k: j for j, k in enumerate(leaves)}, table

    def predict_cif(self, data: TreeData, times, rows=None) -> np.ndarray:
        leaf = self.apply(data, rows)
        index, table = self.leaf_cif_table(times)
        return table[np.array([index[k] for k in leaf], dtype=np.int64)]

    def to_dict(self) -> dict:
        return {"nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)]}

    @classmethod
    def from_dict(cls, d: dict, n_covariates: int, n_markers: int, n_causes: int) -> "SurvivalTree":
        nodes = {}
        for nd in d["nodes"]:
            node = Node.from_dict(nd, n_causes)
            nodes[node.node_id] = node
        tree = cls(nodes, n_covariates, n_markers, n_causes)
        for k, node in nodes.items():
            if not node.is_leaf and (2 * k not in nodes or 2 * k + 1 not in nodes):
                raise ModelFormatError(f"internal node {k} lacks children")
        return tree


# ---------------------------------------------------------------------------
# split search
# ---------------------------------------------------------------------------

def draw_candidates(n_predictors: int, mtry: int, rng) -> np.ndarray:
    """Sorted uniform draw of ``mtry`` predictor indices without replacement."""
    mtry = min(int(mtry), n_predictors)
    return np.sort(rng.choice(n_predictors, size=mtry, replace=False))


def _level_masks(w, max_levels, rng):
    """Left-side level subsets for a categorical feature, one per partition."""
    levels = np.unique(w)
    L = levels.size
    if L < 2:
        return levels, []
    if L <= max_levels:
        # subsets of the first L-1 levels enumerate each unordered partition once
        codes = range(1, 2 ** (L - 1))
    else:
        codes = np.unique(rng.integers(1, 2 ** (L - 1), size=2 ** max_levels))
    subsets = []
    for code in codes:
        bits = [(int(code) >> j) & 1 for j in range(L)]
        subsets.append(tuple(int(levels[j]) for j in range(L) if bits[j]))
    return levels, subsets


def _score(times, causes, masks, n_causes, cause):
    if n_causes == 1:
        grid = _EventGrid(times, (causes > 0).astype(np.int64), 1)
        return _logrank_many(grid, masks)
    grid = _EventGrid(times, causes, cause)
    return _gray_many(grid, masks)


@dataclass
class SplitChoice:
    column: int
    threshold: float | None
    left_levels: tuple[int, ...] | None
    statistic: float
    left: np.ndarray
    candidates: np.ndarray


def best_split(W, categorical, times, causes, params: TreeParams, n_causes=1, rng=None):
    """Best admissible dichotomisation of the columns of ``W``, or None.

    Candidates are ordered by column then threshold (or level-subset code),
    so ``argmax`` implements the lowest-feature, smallest-threshold tie-break.
    """
    W = np.asarray(W, float)
    n, F = W.shape
    masks, meta = [], []
    for j in range(F):
        w = W[:, j]
        if categorical[j]:
            _, subsets = _level_masks(w, params.max_levels, rng)
            for sub in subsets:
                masks.append(np.isin(w, sub))
                meta.append((j, None, sub))
        else:
            for c in np.unique(np.quantile(w, DECILES)):
                masks.append(w <= c)
                meta.append((j, float(c), None))
    if not masks:
        return None
    M = np.column_stack(masks)
    n_left = M.sum(axis=0)
    ok = (n_left >= params.nodesize) & (n - n_left >= params.nodesize)
    if not ok.any():
        return None
    M = M[:, ok]
    meta = [m for m, keep in zip(meta, ok) if keep]
    stats = _score(times, causes, M, n_causes, params.cause)
    valid = ~np.isnan(stats)
    if not valid.any():
        return None
    stats = np.where(valid, stats, -np.inf)
    best = int(np.argmax(stats))
    j, c, sub = meta[best]
    return SplitChoice(j, c, sub, float(stats[best]), M[:, best], stats[valid])


# ---------------------------------------------------------------------------
# tree growing
# ---------------------------------------------------------------------------

def _count_events(causes, n_causes, cause):
    return int(np.count_nonzero(causes > 0) if n_causes == 1 else np.count_nonzero(causes == cause))


def node_features(data: TreeData, rows, candidates, snapshots, q_min=10):
    """Feature matrix for the drawn predictors at one node.

    Returns ``(W, keys, categorical, fits)`` where ``keys`` lists the
    ``(predictor, component)`` of each column and ``fits`` maps each marker
    whose mixed model converged to its fit.  Markers whose fit fails are
    skipped.
    """
    P = data.n_covariates
    cols, keys, cat, fits = [], [], [], {}
    for p in candidates:
        p = int(p)
        if p < P:
            cols.append(data.X[rows, p][:, None])
            keys.append((p, 0))
            cat.append(bool(data.categorical[p]))
            continue
        m = p - P
        stats = data.stats[m].take(rows)
        try:
            fit = fit_lmm(stats, init=snapshots.get(m), q_min=q_min)
        except LmmFitError as exc:
            log.debug("marker %d skipped at node: %s", m, exc)
            continue
        fits[m] = fit
        b = blup_from_stats(fit, stats)
        cols.append(b)
        keys.extend((p, r) for r in range(b.shape[1]))
        cat.extend([False] * b.shape[1])
    W = np.hstack(cols) if cols else np.empty((len(rows), 0))
    return W, keys, np.array(cat, bool), fits


def build_tree(data: TreeData, rows, params: TreeParams, rng, debug=False) -> SurvivalTree:
    """Grow one tree on the subjects at positions ``rows`` (duplicates allowed)."""
    rows = np.asarray(rows, np.int64)
    K = data.n_causes
    nodes = {}
    stack = [(1, rows, {})]
    while stack:
        nid, sub, snaps = stack.pop()
        causes = data.causes[sub]
        n_events = _count_events(causes, K, params.cause)
        node = Node(nid, int(sub.size), n_events)
        nodes[nid] = node
        split = None
        if n_events >= params.minsplit and sub.size >= 2 * params.nodesize:
            cand = draw_candidates(data.n_predictors, params.mtry, rng)
            W, keys, cat, fits = node_features(data, sub, cand, snaps, params.q_min)
            node.lmm = fits
            if W.shape[1]:
                split = best_split(W, cat, data.times[sub], causes, params, K, rng)
        if split is None:
            node.cif = aalen_johansen(data.times[sub], causes, K)
            continue
        node.feature = keys[split.column]
        if split.left_levels is not None:
            node.left_levels = split.left_levels
            w = W[:, split.column]
            node.right_levels = tuple(int(v) for v in np.unique(w[~split.left]))
        else:
            node.threshold = split.threshold
        node.statistic = split.statistic
        node.n_left = int(split.left.sum())
        node.n_right = int(sub.size - node.n_left)
        if debug:
            node.candidates = split.candidates
        child_snaps = {**snaps, **node.lmm}
        stack.append((2 * nid + 1, sub[~split.left], child_snaps))
        stack.append((2 * nid, sub[split.left], child_snaps))
    return SurvivalTree(nodes, data.n_covariates, data.n_markers, K)
