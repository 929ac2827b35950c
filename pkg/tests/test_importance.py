import numpy as np
import pytest

from dynforest.data import Schema
from dynforest.exceptions import DataValidationError
from dynforest.forest import DynamicForest, fit_forest
from dynforest.importance import (Importance, gvimp, importance_report, minimal_depth,
                                  permuted_dataset, vimp)
from dynforest.survival import aalen_johansen
from dynforest.tree import Node, SurvivalTree

from conftest import make_dataset


@pytest.fixture(scope="module")
def fitted():
    ds = make_dataset(70, n_markers=2, seed=21, categorical=True)
    schema = Schema(ds.schema.covariates, ds.schema.markers, 1,
                    (("fixed", ("x1", "g")), ("solo", ("m1",)), ("other", ("m2",))))
    ds = ds.replace(schema=schema)
    return ds, fit_forest(ds, n_estimators=10, random_state=2, q_min=5)


def _leaf(nid, ds):
    rows = slice(nid % 5, None, 5)
    return Node(nid, 1, 0, cif=aalen_johansen(ds.event_time[rows], ds.cause[rows], 1))


def _hand_tree(ds):
    # root splits on covariate 0, left child on marker m1 (predictor 2), right leaf
    root = Node(1, 10, 5, feature=(0, 0), threshold=0.0, n_left=5, n_right=5, statistic=1.0)
    left = Node(2, 5, 3, feature=(2, 1), threshold=0.0, n_left=2, n_right=3, statistic=1.0)
    return SurvivalTree({1: root, 2: left, 3: _leaf(3, ds), 4: _leaf(4, ds), 5: _leaf(5, ds)}, 2, 2, 1)


def test_minimal_depth_hand_fixture(fitted):
    ds, forest = fitted
    f = DynamicForest.from_dict(forest.to_dict())
    f.trees_ = [_hand_tree(ds), _hand_tree(ds), SurvivalTree({1: _leaf(1, ds)}, 2, 2, 1)]
    pred, feat = minimal_depth(f)
    assert pred["x1"] == (1.0, 2)
    assert pred["m1"] == (2.0, 2)
    assert np.isnan(pred["m2"][0]) and pred["m2"][1] == 0
    assert feat["m1_b1"] == (2.0, 2) and "m1_b0" not in feat


def test_minimal_depth_invariants(fitted):
    ds, forest = fitted
    pred, feat = minimal_depth(forest)
    for name, (d, n) in pred.items():
        assert 0 <= n <= 10
        if n:
            assert d >= 1
    for m in ("m1", "m2"):
        for r in (0, 1):
            key = f"{m}_b{r}"
            if key in feat and pred[m][1]:
                # each tree's marker depth is the min over its components
                assert pred[m][1] >= feat[key][1]


def test_root_in_every_tree():
    ds = make_dataset(60, n_markers=0, seed=1)
    forest = fit_forest(ds, n_estimators=5, random_state=0, mtry=1)
    pred, _ = minimal_depth(forest)
    # a single predictor splits every root
    assert pred["x1"] == (1.0, 5)


def test_unused_predictor_vimp_exactly_zero(fitted):
    ds, forest = fitted
    f = DynamicForest.from_dict(forest.to_dict())
    # hand-built trees route on x1 and m1 only, so m2 is never used
    f.trees_ = [_hand_tree(ds) for _ in range(3)]
    f.inbag_ = f.inbag_[:3]
    f.trees_[0].nodes[2].lmm = {0: forest.trees_[0].nodes[1].lmm.get(0) or _any_fit(forest)}
    for t in f.trees_[1:]:
        t.nodes[2].lmm = f.trees_[0].nodes[2].lmm
    assert vimp(f, ds, "m2", repeats=1) == 0.0
    assert gvimp(f, ds, ["m2"], repeats=1) == 0.0
    assert vimp(f, ds, "x1", repeats=1) != 0.0


def _any_fit(forest):
    for t in forest.trees_:
        for n in t.nodes.values():
            if 0 in n.lmm:
                return n.lmm[0]
    raise AssertionError("no marker fit in fixture forest")


def test_singleton_group_equals_vimp(fitted):
    ds, forest = fitted
    imp = Importance(forest, ds, repeats=3, random_state=7)
    assert imp.gvimp(["m1"]) == imp.vimp("m1")
    assert gvimp(forest, ds, "solo", repeats=3, random_state=7) == vimp(forest, ds, "m1", 3, 7)


def test_baseline_shared_and_order_invariant(fitted):
    ds, forest = fitted
    a = importance_report(forest, ds, repeats=2, random_state=1)
    b = Importance(forest, ds, repeats=2, random_state=1)
    for name in reversed(ds.schema.predictors):
        assert b.vimp(name) == a.vimp[name]
    assert set(a.gvimp) == {"fixed", "solo", "other"}


def test_permutation_moves_whole_series(fitted):
    ds, _ = fitted
    rng_for = lambda name: np.random.default_rng(5)
    pds = permuted_dataset(ds, ["m1"], rng_for)
    perm = np.random.default_rng(5).permutation(ds.n_subjects)
    for i in range(ds.n_subjects):
        a, b = pds.series(i, 0), ds.series(perm[i], 0)
        assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
        c, d = pds.series(i, 1), ds.series(i, 1)
        assert np.array_equal(c.values, d.values)
    assert np.array_equal(pds.X, ds.X)


def test_errors(fitted):
    ds, forest = fitted
    with pytest.raises(DataValidationError):
        vimp(forest, ds, "nope")
    with pytest.raises(DataValidationError):
        Importance(forest, ds).gvimp([])
    with pytest.raises(DataValidationError):
        gvimp(forest, ds, "nogroup")


def test_report_csv(fitted, tmp_path):
    ds, forest = fitted
    rep = importance_report(forest, ds, repeats=1)
    rep.write_csv(tmp_path / "imp.csv", ds.schema)
    lines = (tmp_path / "imp.csv").read_text().splitlines()
    assert lines[0] == "predictor,group,vimp,gvimp,min_depth,selection_count"
    assert len(lines) == 1 + len(ds.schema.predictors)
