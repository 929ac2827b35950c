"""Permutation importance (VIMP, grouped VIMP) and minimal depth.

VIMP of a predictor is the mean per-tree OOB integrated Brier score after
permuting it, minus the same mean without permutation.  A fixed covariate
is permuted across subjects; a marker is permuted by handing each subject
the complete measurement series of another subject.  Only trees that split
on the permuted predictor are re-scored, so an unused predictor has VIMP
exactly 0.

Each (repeat, predictor) pair has its own random stream derived from
``random_state``, so permuting a group reuses the draws of its members.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import MarkerTable
from .evaluation import OobScorer
from .exceptions import DataValidationError
from .tree import node_depth


@dataclass
class ImportanceReport:
    vimp: dict = field(default_factory=dict)
    gvimp: dict = field(default_factory=dict)
    min_depth: dict = field(default_factory=dict)
    selection_count: dict = field(default_factory=dict)
    feature_depth: dict = field(default_factory=dict)
    repeats: int = 0

    def rows(self, schema):
        out = []
        for name in schema.predictors:
            g = schema.group_of(name)
            out.append({"predictor": name, "group": g or "",
                        "vimp": self.vimp.get(name, float("nan")),
                        "gvimp": self.gvimp.get(g, float("nan")) if g else float("nan"),
                        "min_depth": self.min_depth.get(name, float("nan")),
                        "selection_count": self.selection_count.get(name, 0)})
        return out

    def write_csv(self, path, schema) -> None:
        fields = ["predictor", "group", "vimp", "gvimp", "min_depth", "selection_count"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for row in self.rows(schema):
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def _predictor_index(schema, name) -> int:
    try:
        return schema.predictors.index(name)
    except ValueError:
        raise DataValidationError(f"unknown predictor {name!r}") from None


def _permute_marker(table: MarkerTable, perm) -> MarkerTable:
    return table.take(perm)


def permuted_dataset(ds, names, rng_for):
    """Copy of ``ds`` with each predictor in ``names`` permuted by ``rng_for(name)``."""
    schema = ds.schema
    X = ds.X.copy()
    markers = list(ds.markers)
    P = schema.n_covariates
    for name in names:
        p = _predictor_index(schema, name)
        perm = rng_for(name).permutation(ds.n_subjects)
        if p < P:
            X[:, p] = ds.X[perm, p]
        else:
            markers[p - P] = _permute_marker(ds.markers[p - P], perm)
    return ds.replace(X=X, markers=markers, validate=False)


def _trees_using(forest, names) -> np.ndarray:
    names = set(names)
    return np.array([b for b, tree in enumerate(forest.trees_)
                     if any(forest.predictor_of_feature(p) in names for p in tree.used_predictors())],
                    dtype=np.int64)


class Importance:
    """Shared baseline for VIMP and gVIMP computations on one forest."""

    def __init__(self, forest, ds, repeats=10, random_state=0, tau1=None, tau2=None):
        if repeats < 1:
            raise DataValidationError("repeats must be >= 1")
        forest.check_schema(ds)
        self.forest = forest
        self.ds = ds
        self.repeats = int(repeats)
        self.seed = int(random_state)
        self.scorer = OobScorer(forest, ds, tau1, tau2)
        self.baseline = self.scorer.tree_scores(ds)
        self.baseline_mean = float(np.nanmean(self.baseline))

    def _rng_for(self, repeat):
        schema = self.ds.schema
        return lambda name: np.random.default_rng([self.seed, repeat, _predictor_index(schema, name)])

    def _score(self, names) -> float:
        trees = _trees_using(self.forest, names)
        if trees.size == 0:
            return 0.0
        diffs = []
        for r in range(self.repeats):
            pds = permuted_dataset(self.ds, names, self._rng_for(r))
            scores = self.baseline.copy()
            scores[trees] = self.scorer.tree_scores(pds, trees)[trees]
            diffs.append(float(np.nanmean(scores)) - self.baseline_mean)
        return float(np.mean(diffs))

    def vimp(self, name) -> float:
        _predictor_index(self.ds.schema, name)
        return self._score([name])

    def gvimp(self, members) -> float:
        members = list(members)
        if not members:
            raise DataValidationError("empty group")
        for m in members:
            _predictor_index(self.ds.schema, m)
        return self._score(members)


def vimp(forest, ds, predictor, repeats=10, random_state=0) -> float:
    return Importance(forest, ds, repeats, random_state).vimp(predictor)


def gvimp(forest, ds, group, repeats=10, random_state=0) -> float:
    """Grouped VIMP; ``group`` is a group name from the schema or a list of predictors."""
    members = ds.schema.group_map.get(group) if isinstance(group, str) else group
    if members is None:
        raise DataValidationError(f"unknown group {group!r}")
    return Importance(forest, ds, repeats, random_state).gvimp(members)


def minimal_depth(forest):
    """Average minimal depth (root = 1) and selection count per predictor and per feature.

    Returns ``(predictor_table, feature_table)``; each maps a name to
    ``(mean_depth or nan, count)``.  Feature names are ``marker_b{r}`` for
    random-effect components.
    """
    schema = forest.schema_
    pred_depths = {name: [] for name in schema.predictors}
    feat_depths = {}
    for tree in forest.trees_:
        first_pred, first_feat = {}, {}
        for node in tree.split_nodes():
            d = node_depth(node.node_id)
            p, r = node.feature
            pname = forest.predictor_of_feature(p)
            fname = _feature_name(forest, p, r)
            first_pred[pname] = min(d, first_pred.get(pname, d))
            first_feat[fname] = min(d, first_feat.get(fname, d))
        for k, d in first_pred.items():
            pred_depths[k].append(d)
        for k, d in first_feat.items():
            feat_depths.setdefault(k, []).append(d)

    def summarise(table):
        return {k: (float(np.mean(v)) if v else float("nan"), len(v)) for k, v in table.items()}

    return summarise(pred_depths), summarise(feat_depths)


def _feature_name(forest, p, r):
    names = forest.feature_names_
    if forest.mode == "rc" or p < forest.schema_.n_covariates:
        return names[p]
    return f"{names[p]}_b{r}"


def importance_report(forest, ds, repeats=10, random_state=0, groups=True) -> ImportanceReport:
    imp = Importance(forest, ds, repeats, random_state)
    rep = ImportanceReport(repeats=repeats)
    for name in ds.schema.predictors:
        rep.vimp[name] = imp.vimp(name)
    if groups:
        for g, members in ds.schema.group_map.items():
            rep.gvimp[g] = imp.gvimp(members)
    pred, feat = minimal_depth(forest)
    rep.min_depth = {k: v[0] for k, v in pred.items()}
    rep.selection_count = {k: v[1] for k, v in pred.items()}
    rep.feature_depth = feat
    return rep
