"""Prediction error: IPCW Brier score, integrated Brier score and dynamic AUC.

Brier scores use inverse probability of censoring weights from a
Kaplan-Meier estimate of the censoring distribution on the evaluated
sample.  The integrated score is the trapezoid integral over the grid of
distinct event times in ``[tau1, tau2]`` (plus both endpoints) divided by
``tau2 - tau1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataValidationError, NonEstimableError
from .survival import censoring_survival, censoring_weights

log = logging.getLogger(__name__)


@dataclass
class ErrorReport:
    grid: np.ndarray
    bs: np.ndarray
    ibs: float
    tau: tuple[float, float]
    n_effective: int
    auc: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tau[0] < self.tau[1]:
            raise DataValidationError("tau1 must be < tau2")


def evaluation_grid(times, causes, tau1, tau2) -> np.ndarray:
    """Distinct event times inside ``[tau1, tau2]`` plus the two endpoints."""
    if not tau1 < tau2:
        raise DataValidationError(f"need tau1 < tau2, got {tau1}, {tau2}")
    times = np.asarray(times, float)
    ev = times[(np.asarray(causes) > 0) & (times >= tau1) & (times <= tau2)]
    return np.unique(np.concatenate([[tau1, tau2], ev]))


def default_tau(times, causes, s=0.0, quantile=0.9) -> tuple[float, float]:
    """``(s, q)`` with q the 90% quantile of observed times after ``s``."""
    times = np.asarray(times, float)
    after = times[times > s]
    if after.size == 0:
        raise DataValidationError(f"no subjects observed beyond {s}")
    return float(s), float(np.quantile(after, quantile))


def ibs(bs_curve, grid, tau1=None, tau2=None) -> float:
    """Trapezoid integral of a Brier curve, normalised by the window length."""
    grid = np.asarray(grid, float)
    bs_curve = np.asarray(bs_curve, float)
    if grid.size < 2:
        raise DataValidationError("integration grid needs at least two points")
    tau1 = grid[0] if tau1 is None else tau1
    tau2 = grid[-1] if tau2 is None else tau2
    keep = (grid >= tau1) & (grid <= tau2)
    g, b = grid[keep], bs_curve[keep]
    if g.size < 2 or not tau1 < tau2:
        raise DataValidationError("integration window must contain at least two grid points")
    return float(np.sum(np.diff(g) * (b[1:] + b[:-1]) / 2.0) / (tau2 - tau1))


def weight_matrix(times, causes, grid, s=None, G=None) -> np.ndarray:
    """IPCW weights ``w_i(t)`` for every grid time, shape (N, T)."""
    if G is None:
        G = censoring_survival(times, causes)
    return np.column_stack([censoring_weights(times, causes, t, s=s, G=G) for t in grid])


def outcome_matrix(times, causes, grid, cause=1, s=None) -> np.ndarray:
    """``I(s < T_i <= t, cause_i = k)`` for every grid time, shape (N, T)."""
    times = np.asarray(times, float)[:, None]
    hit = (times <= np.asarray(grid, float)[None, :]) & (np.asarray(causes)[:, None] == cause)
    if s is not None:
        hit &= times > s
    return hit.astype(float)


def brier_score(pred, times, causes, t, cause=1, weights=None, G=None, norm=None) -> float:
    """IPCW Brier score at ``t`` for predicted cause-``cause`` probabilities.

    ``norm`` defaults to the number of subjects.
    """
    pred = np.asarray(pred, float)
    if np.any((pred < -1e-12) | (pred > 1 + 1e-12)):
        raise DataValidationError("predictions must lie in [0, 1]")
    if weights is None:
        weights = censoring_weights(times, causes, t, G=G)
    y = outcome_matrix(times, causes, [t], cause)[:, 0]
    n = len(pred) if norm is None else norm
    return float(np.sum(weights * (y - pred) ** 2) / n)


def brier_curve(pred, times, causes, grid, cause=1, s=None, G=None, norm=None) -> np.ndarray:
    """Brier score at each grid time; ``pred`` has shape (N, T)."""
    W = weight_matrix(times, causes, grid, s=s, G=G)
    Y = outcome_matrix(times, causes, grid, cause, s=s)
    n = pred.shape[0] if norm is None else norm
    return np.sum(W * (Y - pred) ** 2, axis=0) / n


def dynamic_auc(pred, times, causes, s, w, cause=1, G=None) -> float:
    """IPCW dynamic AUC for predictions made at ``s`` over ``(s, s + w]``.

    Cases have an event of ``cause`` in the window; controls are all other
    subjects known to be free of ``cause`` by ``s + w`` (event-free beyond
    the window, or failed from a competing cause in it).  Cases and
    competing-cause controls get weight ``G(s) / G(T_i-)``, window survivors
    ``G(s) / G(s + w)``.  Ties in the predictions count one half.  Returns
    NaN when there are no cases or no controls.
    """
    pred = np.asarray(pred, float)
    times = np.asarray(times, float)
    causes = np.asarray(causes).astype(np.int64)
    if G is None:
        G = censoring_survival(times, causes)
    at_risk = times > s
    in_win = at_risk & (times <= s + w)
    case = in_win & (causes == cause)
    ctrl = (times > s + w) | (in_win & (causes > 0) & (causes != cause))
    ok = ~np.isnan(pred)
    case &= ok
    ctrl &= ok
    if not case.any() or not ctrl.any():
        return float("nan")
    g_left = G.left(times)
    g_sw = float(G(s + w))
    if np.any(g_left[case | (ctrl & in_win)] <= 0) or (np.any(ctrl & ~in_win) and g_sw <= 0):
        raise NonEstimableError("censoring survival is zero inside the prediction window")
    wc = 1.0 / g_left[case]
    wk = np.empty(int(ctrl.sum()))
    early = in_win[ctrl]
    wk[early] = 1.0 / g_left[ctrl][early]
    wk[~early] = 1.0 / g_sw if (~early).any() else 0.0
    pc, pk = pred[case], pred[ctrl]
    order = np.argsort(pk, kind="stable")
    pk_s, wk_s = pk[order], wk[order]
    cum = np.concatenate([[0.0], np.cumsum(wk_s)])
    below = cum[np.searchsorted(pk_s, pc, side="left")]
    upto = cum[np.searchsorted(pk_s, pc, side="right")]
    conc = np.sum(wc * (below + 0.5 * (upto - below)))
    return float(conc / (wc.sum() * wk.sum()))


# ---------------------------------------------------------------------------
# forest-level assessment
# ---------------------------------------------------------------------------

def oob_error(forest, ds, tau1=None, tau2=None, cause=None) -> ErrorReport:
    """OOB Brier curve and IBS of the ensemble on its training data."""
    cause = forest.cause if cause is None else cause
    if tau1 is None or tau2 is None:
        d1, d2 = default_tau(ds.event_time, ds.cause)
        tau1 = d1 if tau1 is None else tau1
        tau2 = d2 if tau2 is None else tau2
    grid = evaluation_grid(ds.event_time, ds.cause, tau1, tau2)
    G = censoring_survival(ds.event_time, ds.cause)
    cif = forest.predict_oob_cif(ds, grid)[:, :, cause - 1]
    ok = ~np.isnan(cif).any(axis=1)
    if not ok.all():
        log.warning("%d subjects never out-of-bag are excluded from the OOB error", int((~ok).sum()))
    W = weight_matrix(ds.event_time, ds.cause, grid, G=G)[ok]
    Y = outcome_matrix(ds.event_time, ds.cause, grid, cause)[ok]
    bs = np.sum(W * (Y - cif[ok]) ** 2, axis=0) / ok.sum()
    return ErrorReport(grid, bs, ibs(bs, grid, tau1, tau2), (tau1, tau2), int(ok.sum()))


class OobScorer:
    """Per-tree OOB integrated Brier scores on a fixed grid.

    Weights, outcomes and grid are computed once so that repeated scoring of
    permuted datasets (variable importance) shares the exact same baseline.
    """

    def __init__(self, forest, ds, tau1=None, tau2=None, cause=None):
        self.forest = forest
        self.cause = forest.cause if cause is None else cause
        if tau1 is None or tau2 is None:
            d1, d2 = default_tau(ds.event_time, ds.cause)
            tau1 = d1 if tau1 is None else tau1
            tau2 = d2 if tau2 is None else tau2
        self.tau = (float(tau1), float(tau2))
        self.grid = evaluation_grid(ds.event_time, ds.cause, *self.tau)
        G = censoring_survival(ds.event_time, ds.cause)
        self.W = weight_matrix(ds.event_time, ds.cause, self.grid, G=G)
        self.Y = outcome_matrix(ds.event_time, ds.cause, self.grid, self.cause)
        self.dt = np.diff(self.grid)
        self.span = self.tau[1] - self.tau[0]

    def _tree_ibs(self, tree, data, rows):
        pred = tree.predict_cif(data, self.grid, rows)[:, :, self.cause - 1]
        bs = np.sum(self.W[rows] * (self.Y[rows] - pred) ** 2, axis=0) / rows.size
        return float(np.sum(self.dt * (bs[1:] + bs[:-1]) / 2.0) / self.span)

    def tree_scores(self, ds, trees=None) -> np.ndarray:
        """OOB IBS of each tree (NaN for trees without OOB subjects)."""
        data = self.forest.tree_data(ds)
        idx = range(len(self.forest.trees_)) if trees is None else trees
        out = np.full(len(self.forest.trees_), np.nan)
        for b in idx:
            rows = np.flatnonzero(self.forest.oob_mask_[b])
            if rows.size:
                out[b] = self._tree_ibs(self.forest.trees_[b], data, rows)
        return out


def landmark_error(forest, ds, s, tau2, cause=None, tau1=None) -> ErrorReport:
    """Landmark Brier curve and IBS of a forest on (external) data.

    Histories are truncated at ``s``; predictions are the conditional
    probabilities given event-free at ``s``.  Only subjects with observed
    time beyond ``s`` contribute, and the average is over those subjects.
    """
    cause = forest.cause if cause is None else cause
    tau1 = s if tau1 is None else tau1
    if tau1 < s:
        raise DataValidationError("tau1 must be >= the landmark s")
    at_risk = ds.event_time > s
    if not at_risk.any():
        raise DataValidationError(f"no subjects at risk at s={s}")
    grid = evaluation_grid(ds.event_time, ds.cause, tau1, tau2)
    G = censoring_survival(ds.event_time, ds.cause)
    pred = forest.predict_dynamic(ds, s, grid - s)[:, :, cause - 1]
    ok = at_risk & ~np.isnan(pred).any(axis=1)
    if (at_risk & ~ok).any():
        log.warning("%d at-risk subjects are not predictable at s=%g", int((at_risk & ~ok).sum()), s)
    W = weight_matrix(ds.event_time, ds.cause, grid, s=s, G=G)
    Y = outcome_matrix(ds.event_time, ds.cause, grid, cause, s=s)
    P = np.where(ok[:, None], pred, 0.0)
    bs = np.sum((W * (Y - P) ** 2)[ok], axis=0) / ok.sum()
    return ErrorReport(grid, bs, ibs(bs, grid, tau1, tau2), (tau1, tau2), int(ok.sum()))


def external_ibs(forest, ds, s, tau1, tau2, cause=None) -> ErrorReport:
    forest.check_schema(ds)
    if s > tau1:
        raise DataValidationError("landmark s must not exceed tau1")
    return landmark_error(forest, ds, s, tau2, cause, tau1)


def landmark_metrics(forest, ds, s, w, cause=None, oob=False) -> dict:
    """BS at ``s + w``, IBS over ``[s, s + w]`` and dynamic AUC at ``(s, w)``."""
    cause = forest.cause if cause is None else cause
    grid = evaluation_grid(ds.event_time, ds.cause, s, s + w)
    at_risk = ds.event_time > s
    if not at_risk.any():
        raise DataValidationError(f"no subjects at risk at s={s}")
    G = censoring_survival(ds.event_time, ds.cause)
    pred = forest.predict_dynamic(ds, s, grid - s, oob=oob)[:, :, cause - 1]
    ok = at_risk & ~np.isnan(pred).any(axis=1)
    W = weight_matrix(ds.event_time, ds.cause, grid, s=s, G=G)
    Y = outcome_matrix(ds.event_time, ds.cause, grid, cause, s=s)
    P = np.where(ok[:, None], pred, 0.0)
    bs = np.sum((W * (Y - P) ** 2)[ok], axis=0) / max(ok.sum(), 1)
    p_end = np.where(ok, P[:, -1], np.nan)
    return {"bs": float(bs[-1]), "ibs": ibs(bs, grid, s, s + w),
            "auc": dynamic_auc(p_end, ds.event_time, ds.cause, s, w, cause, G=G),
            "n": int(ok.sum())}


def tune_mtry(ds, grid, n_estimators=100, tau1=None, tau2=None, **params):
    """Fit one forest per ``mtry`` in ``grid``; return ``(best, {mtry: oob_ibs})``.

    Ties go to the smaller ``mtry``.
    """
    from .forest import DynamicForest

    grid = sorted({int(m) for m in grid})
    if not grid:
        raise DataValidationError("empty mtry grid")
    table = {}
    for m in grid:
        forest = DynamicForest(n_estimators=n_estimators, mtry=m, **params).fit(ds)
        table[m] = oob_error(forest, ds, tau1, tau2).ibs
    best = min(grid, key=lambda m: (table[m], m))
    return best, table


def stratified_folds(causes, n_folds, rng) -> np.ndarray:
    """Fold label per subject, dealing each cause stratum round-robin."""
    causes = np.asarray(causes)
    n = causes.size
    if not 2 <= n_folds <= n:
        raise DataValidationError(f"n_folds must be in 2..{n}")
    fold = np.empty(n, dtype=np.int64)
    offset = 0
    for c in np.unique(causes)[::-1]:
        idx = rng.permutation(np.flatnonzero(causes == c))
        fold[idx] = (offset + np.arange(idx.size)) % n_folds
        offset += idx.size
    return fold


def cross_validate(ds, n_folds=10, repeats=1, landmarks=(2.0,), horizons=(2.0,),
                   random_state=0, cause=None, **forest_params) -> list[dict]:
    """Repeated stratified k-fold assessment of landmark metrics.

    Returns records ``{metric, s, w, fold, repeat, value}``; metrics that
    are undefined on a fold are NaN.
    """
    from .forest import DynamicForest

    rng = np.random.default_rng(random_state)
    records = []
    for r in range(repeats):
        folds = stratified_folds(ds.cause, n_folds, rng)
        for f in range(n_folds):
            test = np.flatnonzero(folds == f)
            train = np.flatnonzero(folds != f)
            if not np.any(ds.cause[train] > 0):
                raise DataValidationError(f"training part of fold {f} has no events")
            params = dict(forest_params)
            params.setdefault("random_state", int(rng.integers(2 ** 31)))
            forest = DynamicForest(**params).fit(ds.take(train))
            test_ds = ds.take(test)
            for s in landmarks:
                for w in horizons:
                    try:
                        vals = landmark_metrics(forest, test_ds, s, w, cause)
                    except (DataValidationError, NonEstimableError) as exc:
                        log.info("fold %d repeat %d (s=%g, w=%g): %s", f, r, s, w, exc)
                        vals = {"bs": np.nan, "ibs": np.nan, "auc": np.nan}
                    for metric in ("bs", "ibs", "auc"):
                        records.append({"metric": metric, "s": s, "w": w, "fold": f,
                                        "repeat": r, "value": vals[metric]})
    return records


def cv_assignments(ds, n_folds, repeats=1, random_state=0) -> list[np.ndarray]:
    """Fold labels per repeat, as drawn by :func:`cross_validate`."""
    rng = np.random.default_rng(random_state)
    out = []
    for _ in range(repeats):
        out.append(stratified_folds(ds.cause, n_folds, rng))
        for _ in range(n_folds):
            rng.integers(2 ** 31)
    return out
