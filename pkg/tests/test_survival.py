import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynforest.evaluation import brier_score
from dynforest.exceptions import NonEstimableError
from dynforest.survival import (_EventGrid, _gray_many, _logrank_many, aalen_johansen,
                                censoring_survival, censoring_weights, gray_stat, kaplan_meier,
                                logrank_stat)


# -- brute-force oracles ----------------------------------------------------

def km_oracle(times, status, t):
    s = 1.0
    for u in sorted(set(times[status > 0])):
        if u > t:
            break
        n = sum(1 for x in times if x >= u)
        d = sum(1 for x, e in zip(times, status) if x == u and e > 0)
        s *= 1 - d / n
    return s


def aj_oracle(times, causes, t, k):
    s, f = 1.0, 0.0
    for u in sorted(set(times[causes > 0])):
        if u > t:
            break
        n = sum(1 for x in times if x >= u)
        dk = sum(1 for x, c in zip(times, causes) if x == u and c == k)
        d = sum(1 for x, c in zip(times, causes) if x == u and c > 0)
        f += s * dk / n
        s *= 1 - d / n
    return f


def logrank_oracle(group, times, status):
    o_e, v = 0.0, 0.0
    for u in sorted(set(times[status > 0])):
        n = sum(1 for x in times if x >= u)
        n1 = sum(1 for x, g in zip(times, group) if x >= u and g)
        d = sum(1 for x, e in zip(times, status) if x == u and e > 0)
        d1 = sum(1 for x, e, g in zip(times, status, group) if x == u and e > 0 and g)
        o_e += d1 - d * n1 / n
        if n > 1:
            v += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    return o_e ** 2 / v


def censoring_km_oracle(times, causes, t, left=False):
    g = 1.0
    for u in sorted(set(times[causes == 0])):
        if u > t or (left and u >= t):
            break
        n = sum(1 for x, c in zip(times, causes) if x > u or (x == u and c == 0))
        c = sum(1 for x, cc in zip(times, causes) if x == u and cc == 0)
        g *= 1 - c / n
    return g


def _random_data(rng, n, K=1, ties=True):
    t = rng.integers(1, 15, n).astype(float) if ties else rng.exponential(5, n)
    c = rng.integers(0, K + 1, n)
    return t, c


# -- hand values --------------------------------------------------------------

T5 = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
C5 = np.array([1, 0, 1, 0, 1])


def test_km_hand():
    km = kaplan_meier(T5, C5)
    assert km.jump_times.tolist() == [1.0, 3.0, 5.0]
    assert np.allclose(km.values, [0.8, 0.8 * 2 / 3, 0.0], atol=1e-15)
    assert km(2.999) == pytest.approx(0.8) and km.left(3.0) == pytest.approx(0.8)
    assert km(0.5) == 1.0


def test_aj_hand():
    # subjects: 1 (cause 1), 2 (cause 2), 3 (censored), 4 (cause 1)
    aj = aalen_johansen([1.0, 2.0, 3.0, 4.0], [1, 2, 0, 1])
    assert np.allclose(aj([4.0])[0], [0.25 + 0.5, 0.25], atol=1e-15)
    assert np.allclose(aj([1.5])[0], [0.25, 0.0])
    aj.check()


def test_censoring_hand():
    G = censoring_survival(T5, C5)
    assert np.allclose(G(np.array([0, 1, 2, 3, 4, 5])), [1, 1, 0.75, 0.75, 0.375, 0.375])
    w = censoring_weights(T5, C5, 3.5)
    assert np.allclose(w, [1, 0, 4 / 3, 4 / 3, 4 / 3], atol=1e-15)


def test_censoring_ties_events_first():
    # event and censoring tied at 2: the event leaves first, so the censored
    # subject is the only one at risk for censoring at 2.
    G = censoring_survival([1.0, 2.0, 2.0, 3.0], [1, 1, 0, 1])
    assert G(2.0) == pytest.approx(1 - 1 / 2)


def test_logrank_hand():
    g = np.array([1, 0, 1, 0, 0, 1])
    t = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    s = np.array([1, 1, 0, 1, 0, 1])
    assert logrank_stat(g, t, s) == pytest.approx(logrank_oracle(g.astype(bool), t, s), abs=1e-12)


def test_logrank_frozen_value():
    g = np.array([0, 0, 1, 1, 1])
    t = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    s = np.array([1, 1, 1, 0, 1])
    # O-E = -3/5 - 3/4, V = 6/25 + 3/16 (later event times have no spread)
    assert logrank_stat(g, t, s) == pytest.approx(1.35 ** 2 / 0.4275, abs=1e-12)


# -- oracle sweeps ------------------------------------------------------------

def test_km_aj_oracle_sweep():
    rng = np.random.default_rng(1)
    for _ in range(30):
        t, c = _random_data(rng, int(rng.integers(2, 25)), K=2)
        km = kaplan_meier(t, c > 0)
        aj = aalen_johansen(t, c, n_causes=2)
        for u in np.linspace(0, 16, 17):
            assert km(u) == pytest.approx(km_oracle(t, c, u), abs=1e-12)
            for k in (1, 2):
                assert aj([u])[0, k - 1] == pytest.approx(aj_oracle(t, c, u, k), abs=1e-12)
            assert aj([u])[0].sum() == pytest.approx(1 - km(u), abs=1e-12)


def test_logrank_oracle_sweep():
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(50):
        n = int(rng.integers(4, 40))
        t, c = _random_data(rng, n, ties=bool(rng.integers(2)))
        g = rng.integers(0, 2, n).astype(bool)
        if g.all() or not g.any() or not c.any():
            continue
        ref = logrank_oracle(g, t, c)
        got = logrank_stat(g, t, c)
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-10)
        checked += 1
    assert checked > 40


def test_gray_equals_logrank_without_competing():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(4, 40))
        t, c = _random_data(rng, n)
        g = rng.integers(0, 2, n)
        if g.all() or not g.any() or not c.any():
            continue
        assert gray_stat(g, t, c) == pytest.approx(logrank_stat(g, t, c), rel=1e-8, abs=1e-10)


def gray_oracle(group, times, causes):
    """Plain-loop score and variance from the weighted subdistribution risk set."""
    ev = sorted(set(times[causes > 0]))
    info = {}
    for g in (True, False):
        tg, cg = times[group == g], causes[group == g]
        rows, S, F2 = [], 1.0, 0.0
        for u in ev:
            Y = int(np.sum(tg >= u))
            d1 = int(np.sum((tg == u) & (cg == 1)))
            d2 = int(np.sum((tg == u) & (cg > 1)))
            g_left = censoring_km_oracle(tg, cg, u, left=True)
            R = Y + sum(g_left / censoring_km_oracle(tg, cg, x, left=True)
                        for x, c in zip(tg, cg) if x < u and c > 1)
            rows.append(dict(Y=Y, d2=d2, R=R, F2l=F2, d1=d1))
            if Y:
                F2 += S * d2 / Y
                S *= 1 - (d1 + d2) / Y
        info[g] = rows
    A, B = info[True], info[False]
    n_ev = len(ev)
    Rt = [A[j]["R"] + B[j]["R"] for j in range(n_ev)]
    d1t = [A[j]["d1"] + B[j]["d1"] for j in range(n_ev)]
    score = sum(A[j]["d1"] - d1t[j] * A[j]["R"] / Rt[j] for j in range(n_ev) if Rt[j] > 0)
    dg = [d1t[j] / Rt[j] if Rt[j] > 0 else 0.0 for j in range(n_ev)]
    F0, s = [], 1.0
    for j in range(n_ev):
        s *= 1 - dg[j]
        F0.append(1 - s)
    F0l = [0.0] + F0[:-1]
    K = [A[j]["R"] * B[j]["R"] / Rt[j] if Rt[j] > 0 else 0.0 for j in range(n_ev)]
    inc = [K[j] * dg[j] / (1 - F0l[j]) if 1 - F0l[j] > 1e-12 else 0.0 for j in range(n_ev)]
    J = [sum(inc[m] for m in range(j + 1, n_ev)) for j in range(n_ev)]
    var = 0.0
    for rows in (A, B):
        for j, r in enumerate(rows):
            if r["Y"] == 0:
                continue
            tie = (Rt[j] - d1t[j]) / (Rt[j] - 1) if Rt[j] > 1 else 1.0
            a = (K[j] * r["Y"] / r["R"] if r["R"] > 0 else 0.0) - r["F2l"] * J[j]
            b = (1 - F0[j]) * J[j]
            var += a * a * r["R"] * dg[j] * tie / r["Y"] ** 2 + b * b * r["d2"] / r["Y"] ** 2
    return score, var


def test_gray_hand_fixture():
    t = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
    c = np.array([1, 2, 1, 0, 1, 2, 0, 1])
    g = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
    score, var = gray_oracle(g, t, c)
    # score by hand: t=1: 1 - 4/8; t=3: 1 - 3/7 (subject 2 stays with weight 1);
    # the censoring at t=4 empties G of the early group, so R_A = 0 at t=5 and t=8
    assert score == pytest.approx(15 / 14, abs=1e-12)
    assert gray_stat(g, t, c) == pytest.approx(score ** 2 / var, rel=1e-10)
    assert gray_stat(g, t, c) == pytest.approx(2.2887689433257212, rel=1e-10)


def test_gray_oracle_sweep():
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(60):
        n = int(rng.integers(6, 30))
        t, c = _random_data(rng, n, K=2)
        g = rng.integers(0, 2, n).astype(bool)
        if g.all() or not g.any() or not (c == 1).any():
            continue
        score, var = gray_oracle(g, t, c)
        got = gray_stat(g, t, c)
        if var <= 0:
            assert got is None
            continue
        assert got == pytest.approx(score ** 2 / var, rel=1e-8)
        checked += 1
    assert checked > 40


def test_vectorised_masks_match_single_calls():
    rng = np.random.default_rng(5)
    t, c = _random_data(rng, 60, K=2)
    masks = rng.integers(0, 2, (60, 7)).astype(bool)
    grid = _EventGrid(t, c, 1)
    lr = _logrank_many(grid, masks)
    gr = _gray_many(grid, masks)
    for j in range(7):
        assert lr[j] == pytest.approx(logrank_stat(masks[:, j], t, c), rel=1e-12)
        assert gr[j] == pytest.approx(gray_stat(masks[:, j], t, c), rel=1e-12)


@pytest.mark.parametrize("stat", ["logrank", "gray"])
def test_monotone_time_transform_invariance(stat):
    rng = np.random.default_rng(6)
    for _ in range(20):
        t, c = _random_data(rng, 40, K=2)
        g = rng.integers(0, 2, 40)
        if g.all() or not g.any():
            continue
        f = (lambda *a: logrank_stat(*a)) if stat == "logrank" else (lambda *a: gray_stat(*a))
        a, b = f(g, t, c), f(g, t ** 3, c)
        assert (a is None and b is None) or a == pytest.approx(b, rel=1e-12)


@pytest.mark.parametrize("stat", [logrank_stat, gray_stat])
def test_group_relabel_invariance(stat):
    rng = np.random.default_rng(7)
    for _ in range(20):
        t, c = _random_data(rng, 30, K=2)
        g = rng.integers(0, 2, 30)
        if g.all() or not g.any() or not (c == 1).any():
            continue
        assert stat(g, t, c) == pytest.approx(stat(1 - g, t, c), rel=1e-10)


def test_undefined_statistics_return_none():
    assert logrank_stat([0, 1], [1.0, 2.0], [0, 0]) is None
    assert gray_stat([0, 1, 0], [1.0, 2.0, 3.0], [2, 2, 0]) is None
    with pytest.raises(ValueError):
        logrank_stat([1, 1], [1.0, 2.0], [1, 1])


def test_ipcw_brier_oracle():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n = int(rng.integers(5, 30))
        t, c = _random_data(rng, n, K=2)
        c[np.argmax(t)] = 1  # keep G positive at the largest time
        pred = rng.uniform(0, 1, n)
        for u in (3.0, 7.5, 11.0):
            ref = 0.0
            g_t = censoring_km_oracle(t, c, u)
            for i in range(n):
                if t[i] <= u and c[i] > 0:
                    w = 1 / censoring_km_oracle(t, c, t[i], left=True)
                elif t[i] > u:
                    w = 1 / g_t
                else:
                    w = 0.0
                y = 1.0 if (t[i] <= u and c[i] == 1) else 0.0
                ref += w * (y - pred[i]) ** 2
            assert brier_score(pred, t, c, u) == pytest.approx(ref / n, abs=1e-12)


def test_censoring_weight_errors():
    with pytest.raises(NonEstimableError):
        censoring_weights([1.0, 2.0], [1, 0], 3.0, s=2.5)
    assert np.allclose(censoring_weights([1.0, 2.0], [1, 0], 3.0), [1.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.integers(0, 3)), min_size=1, max_size=40))
def test_aj_invariants(data):
    t = np.array([d[0] for d in data], float)
    c = np.array([d[1] for d in data])
    aj = aalen_johansen(t, c, n_causes=3)
    aj.check()
    km = kaplan_meier(t, c > 0)
    grid = np.arange(0, 22, 0.5)
    assert np.allclose(aj(grid).sum(axis=1), 1 - km(grid), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.integers(0, 1)), min_size=1, max_size=40))
def test_km_monotone_and_bounded(data):
    t = np.array([d[0] for d in data], float)
    s = np.array([d[1] for d in data])
    km = kaplan_meier(t, s)
    v = km(np.arange(0, 22))
    assert np.all(np.diff(v) <= 1e-15) and np.all((v >= 0) & (v <= 1))
