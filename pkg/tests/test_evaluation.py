import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynforest.evaluation import (brier_score, cross_validate, cv_assignments, dynamic_auc,
                                  evaluation_grid, external_ibs, ibs, landmark_metrics, oob_error,
                                  stratified_folds, tune_mtry)
from dynforest.exceptions import DataValidationError
from dynforest.forest import fit_forest

from conftest import make_dataset
from test_survival import censoring_km_oracle


def test_brier_trivial():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    c = np.array([1, 1, 1, 1])
    y = (t <= 2.5).astype(float)
    assert brier_score(y, t, c, 2.5) == 0.0
    assert brier_score(np.full(4, 0.5), t, c, 2.5) == pytest.approx(0.25)


def test_brier_six_subject_hand():
    t = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    c = np.array([1, 0, 1, 2, 1, 0])
    p = np.array([0.9, 0.1, 0.6, 0.3, 0.2, 0.1])
    # G: 1 until 2, 4/5 after; at t=4.5: subjects 1, 3 (cause 1, weight 1 and 5/4),
    # 4 (cause 2, weight 5/4, outcome 0), 5 and 6 beyond (weight 5/4), 2 censored (0)
    ref = (1 * 0.1 ** 2 + 1.25 * 0.4 ** 2 + 1.25 * 0.3 ** 2 + 1.25 * 0.2 ** 2 + 1.25 * 0.1 ** 2) / 6
    assert brier_score(p, t, c, 4.5) == pytest.approx(ref, abs=1e-15)


def test_clairvoyant_is_best():
    rng = np.random.default_rng(0)
    t = rng.exponential(1, 50)
    c = np.ones(50, int)
    y = (t <= 1.0).astype(float)
    best = brier_score(y, t, c, 1.0)
    for _ in range(20):
        assert best <= brier_score(rng.uniform(0, 1, 50), t, c, 1.0)


def test_ibs_trivial_and_refinement():
    g = np.linspace(0, 1, 11)
    assert ibs(np.full(11, 0.3), g) == pytest.approx(0.3)
    assert ibs(0.2 * g, g) == pytest.approx(0.1)
    f = lambda x: 0.1 + 0.05 * np.sin(3 * x)
    g1, g2 = np.linspace(0, 2, 100), np.linspace(0, 2, 10000)
    assert abs(ibs(f(g1), g1) - ibs(f(g2), g2)) < 1e-3
    with pytest.raises(DataValidationError):
        ibs([0.1], [0.0])


def test_grid():
    g = evaluation_grid([0.5, 1.0, 2.0, 3.0], [1, 0, 2, 1], 0.8, 2.5)
    assert g.tolist() == [0.8, 2.0, 2.5]


def test_auc_trivial_and_mann_whitney():
    rng = np.random.default_rng(1)
    t = rng.exponential(2, 60)
    c = rng.integers(1, 3, 60)
    s, w = 0.5, 1.5
    assert dynamic_auc(np.full(60, 0.3), t, c, s, w) == pytest.approx(0.5)
    case = (t > s) & (t <= s + w) & (c == 1)
    assert dynamic_auc(case.astype(float), t, c, s, w) == pytest.approx(1.0)
    p = rng.uniform(0, 1, 60)
    ctrl = (t > s + w) | ((t > s) & (t <= s + w) & (c == 2))
    mw = np.mean([(a > b) + 0.5 * (a == b) for a in p[case] for b in p[ctrl]])
    assert dynamic_auc(p, t, c, s, w) == pytest.approx(mw, abs=1e-12)
    assert dynamic_auc(1 - p, t, c, s, w) == pytest.approx(1 - mw, abs=1e-12)
    assert np.isnan(dynamic_auc(p, t, np.full(60, 2), s, w))


def test_auc_ipcw_oracle():
    rng = np.random.default_rng(2)
    t = rng.integers(1, 10, 40).astype(float)
    c = rng.integers(0, 3, 40)
    p = rng.uniform(0, 1, 40)
    s, w = 2.0, 3.0
    num = den = 0.0
    for i in range(40):
        if not (s < t[i] <= s + w and c[i] == 1):
            continue
        wi = 1 / censoring_km_oracle(t, c, t[i], left=True)
        for j in range(40):
            if t[j] > s + w:
                wj = 1 / censoring_km_oracle(t, c, s + w)
            elif s < t[j] <= s + w and c[j] == 2:
                wj = 1 / censoring_km_oracle(t, c, t[j], left=True)
            else:
                continue
            num += wi * wj * ((p[i] > p[j]) + 0.5 * (p[i] == p[j]))
            den += wi * wj
    assert dynamic_auc(p, t, c, s, w) == pytest.approx(num / den, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_auc_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    t = rng.exponential(2, 30)
    c = rng.integers(0, 3, 30)
    a = dynamic_auc(rng.uniform(0, 1, 30), t, c, 0.5, 2.0)
    assert np.isnan(a) or 0 <= a <= 1


@pytest.fixture(scope="module")
def small_forest():
    ds = make_dataset(60, n_markers=1, seed=2)
    return ds, fit_forest(ds, n_estimators=8, random_state=3, q_min=5)


def test_external_ibs_term_by_term(small_forest):
    ds, forest = small_forest
    ext = make_dataset(10, n_markers=1, seed=44)
    s, tau2 = 1.0, 6.0
    rep = external_ibs(forest, ext, s, s, tau2)
    t, c = ext.event_time, ext.cause
    grid = evaluation_grid(t, c, s, tau2)
    pred = forest.predict_dynamic(ext, s, grid - s)[:, :, 0]
    at_risk = t > s
    g_s = censoring_km_oracle(t, c, s)
    bs = []
    for k, u in enumerate(grid):
        total = 0.0
        for i in np.flatnonzero(at_risk):
            if t[i] <= u and c[i] > 0:
                wgt = g_s / censoring_km_oracle(t, c, t[i], left=True)
            elif t[i] > u:
                wgt = g_s / censoring_km_oracle(t, c, u)
            else:
                wgt = 0.0
            y = float(t[i] <= u and c[i] == 1)
            total += wgt * (y - pred[i, k]) ** 2
        bs.append(total / at_risk.sum())
    assert np.allclose(rep.bs, bs, atol=1e-12)
    assert rep.ibs == pytest.approx(ibs(np.array(bs), grid), abs=1e-12)
    # subject ordering does not matter
    perm = ext.take(np.random.default_rng(0).permutation(10))
    assert external_ibs(forest, perm, s, s, tau2).ibs == pytest.approx(rep.ibs, abs=1e-12)


def test_external_ibs_errors(small_forest):
    ds, forest = small_forest
    with pytest.raises(DataValidationError):
        external_ibs(forest, ds, 3.0, 2.0, 5.0)
    with pytest.raises(DataValidationError):
        external_ibs(forest, ds, 100.0, 100.0, 200.0)


def test_oob_error_and_metrics(small_forest):
    ds, forest = small_forest
    rep = oob_error(forest, ds, 0.5, 5.0)
    assert 0 <= rep.ibs <= 1 and np.all((rep.bs >= 0) & (rep.bs <= 1))
    m = landmark_metrics(forest, ds, 1.0, 2.0, oob=True)
    assert set(m) == {"bs", "ibs", "auc", "n"}


def test_tune_mtry():
    ds = make_dataset(50, n_markers=1, seed=5, categorical=True)
    best, table = tune_mtry(ds, [2], n_estimators=3, random_state=0, q_min=5)
    assert best == 2 and list(table) == [2]
    best, table = tune_mtry(ds, [1, 2, 3], n_estimators=3, random_state=0, q_min=5)
    assert best == min(table, key=lambda m: (table[m], m))


def test_folds():
    rng = np.random.default_rng(0)
    causes = np.r_[np.zeros(10, int), np.ones(7, int), np.full(3, 2)]
    f = stratified_folds(causes, 3, rng)
    for k in (1, 2):
        counts = np.bincount(f[causes == k], minlength=3)
        assert counts.max() - counts.min() <= 1
    ds = make_dataset(20, seed=1)
    a = cv_assignments(ds, 4, repeats=2, random_state=5)
    b = cv_assignments(ds, 4, repeats=2, random_state=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_leave_one_out_runs():
    ds = make_dataset(12, n_markers=1, seed=7)
    ds_events = ds.cause.sum()
    assert ds_events > 1
    recs = cross_validate(ds, n_folds=12, repeats=1, landmarks=(1.0,), horizons=(2.0,),
                          random_state=1, n_estimators=2, q_min=3)
    folds = cv_assignments(ds, 12, random_state=1)[0]
    assert sorted(folds.tolist()) == list(range(12))
    assert {r["fold"] for r in recs} == set(range(12))


def test_cv_same_folds_as_reported():
    ds = make_dataset(30, n_markers=1, seed=8)
    recs = cross_validate(ds, n_folds=3, repeats=2, landmarks=(1.0,), horizons=(2.0,),
                          random_state=4, n_estimators=2, q_min=3)
    again = cross_validate(ds, n_folds=3, repeats=2, landmarks=(1.0,), horizons=(2.0,),
                           random_state=4, n_estimators=2, q_min=3)
    assert len(recs) == 2 * 3 * 3
    assert [r["value"] for r in recs] == pytest.approx([r["value"] for r in again], nan_ok=True)
