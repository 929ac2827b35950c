"""Nonparametric survival estimators and two-sample statistics.

Conventions used throughout:

* curves are right-continuous step functions; ``curve(t)`` returns the value
  after any jump at ``t`` and ``curve.left(t)`` the left limit;
* at a tied time, events are processed before censorings;
* the two-sample statistics return ``None`` when no valid value exists
  (no events of the relevant kind, or zero variance).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NonEstimableError


@dataclass(frozen=True, eq=False)
class SurvCurve:
    jump_times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)] if len(self.values) else 1.0, 1.0)
        return out

    def left(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="left") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)] if len(self.values) else 1.0, 1.0)
        return out


@dataclass(frozen=True, eq=False)
class CifCurve:
    """Cumulative incidence per cause; ``values[j, k-1]`` is the value after jump j."""

    jump_times: np.ndarray
    values: np.ndarray

    @property
    def n_causes(self) -> int:
        return self.values.shape[1]

    def __call__(self, t) -> np.ndarray:
        """Values at ``t``, shape ``(len(t), K)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        padded = np.vstack([np.zeros((1, self.n_causes)), self.values])
        return padded[idx + 1]

    def check(self, atol=1e-12) -> None:
        v = self.values
        if v.size == 0:
            return
        if np.any(v < -atol) or np.any(np.diff(v, axis=0) < -atol):
            raise AssertionError("CIF must be non-negative and non-decreasing")
        if np.any(v.sum(axis=1) > 1 + atol):
            raise AssertionError("sum of CIFs exceeds 1")
        if np.any(np.diff(self.jump_times) <= 0):
            raise AssertionError("CIF jump times must be strictly increasing")

    def to_dict(self) -> dict:
        return {"t": [float(x) for x in self.jump_times],
                "cif": [[float(x) for x in row] for row in self.values]}

    @classmethod
    def from_dict(cls, d: dict, n_causes: int) -> "CifCurve":
        vals = np.asarray(d["cif"], float).reshape(len(d["t"]), n_causes)
        return cls(np.asarray(d["t"], float), vals)


def _as_arrays(times, flags):
    times = np.asarray(times, dtype=float).ravel()
    flags = np.asarray(flags).ravel()
    if times.size == 0:
        raise ValueError("empty input")
    if times.shape != flags.shape:
        raise ValueError("times and status must have the same length")
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise ValueError("times must be finite and non-negative")
    return times, flags


def kaplan_meier(times, status) -> SurvCurve:
    """Product-limit estimator; ``status`` is True for an event."""
    times, status = _as_arrays(times, status)
    status = status.astype(bool)
    ev_times = np.unique(times[status])
    if ev_times.size == 0:
        return SurvCurve(np.empty(0), np.empty(0))
    at_risk = times.size - np.searchsorted(np.sort(times), ev_times, side="left")
    d = np.searchsorted(np.sort(times[status]), ev_times, side="right") - \
        np.searchsorted(np.sort(times[status]), ev_times, side="left")
    return SurvCurve(ev_times, np.cumprod(1.0 - d / at_risk))


def aalen_johansen(times, causes, n_causes=None) -> CifCurve:
    """Cumulative incidence per cause: sum over jumps of ``S(t-) d_k / n``."""
    times, causes = _as_arrays(times, causes)
    causes = causes.astype(np.int64)
    if np.any(causes < 0):
        raise ValueError("causes must be >= 0")
    K = int(n_causes) if n_causes is not None else max(int(causes.max()), 1)
    if causes.max() > K:
        raise ValueError(f"cause above n_causes={K}")
    ev = causes > 0
    ev_times = np.unique(times[ev])
    if ev_times.size == 0:
        return CifCurve(np.empty(0), np.empty((0, K)))
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, ev_times, side="left")
    pos = np.searchsorted(ev_times, times[ev])
    dk = np.zeros((ev_times.size, K))
    np.add.at(dk, (pos, causes[ev] - 1), 1.0)
    d = dk.sum(axis=1)
    surv = np.cumprod(1.0 - d / at_risk)
    surv_left = np.concatenate([[1.0], surv[:-1]])
    cif = np.cumsum(surv_left[:, None] * dk / at_risk[:, None], axis=0)
    return CifCurve(ev_times, cif)


# ---------------------------------------------------------------------------
# Two-sample statistics (vectorised over many candidate splits)
# ---------------------------------------------------------------------------

class _EventGrid:
    """Sorted data reduced to distinct event times, reusable across splits."""

    def __init__(self, times, causes, cause_of_interest=1):
        times = np.asarray(times, dtype=float).ravel()
        causes = np.asarray(causes).astype(np.int64).ravel()
        order = np.argsort(times, kind="stable")
        self.order = order
        self.t = times[order]
        c = causes[order]
        self.n = times.size
        self.ev_times = np.unique(self.t[c > 0])
        self.first = np.searchsorted(self.t, self.ev_times, side="left")
        self.last = np.searchsorted(self.t, self.ev_times, side="right")
        self.is1 = (c == cause_of_interest).astype(float)
        self.is2 = ((c > 0) & (c != cause_of_interest)).astype(float)
        self.is0 = (c == 0).astype(float)
        # all distinct times, for censoring distributions within groups
        self.all_times = np.unique(self.t)
        self.a_first = np.searchsorted(self.t, self.all_times, side="left")
        self.a_last = np.searchsorted(self.t, self.all_times, side="right")
        self.ev_pos = np.searchsorted(self.all_times, self.ev_times)

    def _counts(self, masks):
        """At-risk and event counts per event time for each column of ``masks``."""
        g = masks[self.order].astype(float)                       # (n, m)
        rev = np.vstack([np.cumsum(g[::-1], axis=0)[::-1], np.zeros((1, g.shape[1]))])
        Y = rev[self.first]                                        # (J, m)
        c1 = np.vstack([np.zeros((1, g.shape[1])), np.cumsum(g * self.is1[:, None], axis=0)])
        c2 = np.vstack([np.zeros((1, g.shape[1])), np.cumsum(g * self.is2[:, None], axis=0)])
        d1 = c1[self.last] - c1[self.first]
        d2 = c2[self.last] - c2[self.first]
        return Y, d1, d2

    def _weighted_risk(self, masks):
        """Subdistribution risk sets ``R_g`` at each event time per mask column.

        Competing failures stay at risk with weight ``G_g(t-) / G_g(T_i-)``,
        ``G_g`` the censoring Kaplan-Meier of the group (events first at ties).
        """
        g = masks[self.order].astype(float)
        m = g.shape[1]
        rev = np.vstack([np.cumsum(g[::-1], axis=0)[::-1], np.zeros((1, m))])
        Y = rev[self.a_first]

        def per_time(flag):
            c = np.vstack([np.zeros((1, m)), np.cumsum(g * flag[:, None], axis=0)])
            return c[self.a_last] - c[self.a_first]

        dc, d2 = per_time(self.is0), per_time(self.is2)
        de = per_time(self.is1) + d2
        with np.errstate(divide="ignore", invalid="ignore"):
            at_c = Y - de
            G = np.cumprod(np.where(at_c > 0, 1.0 - dc / at_c, 1.0), axis=0)
            G_left = np.vstack([np.ones((1, m)), G[:-1]])
            inc = np.where(d2 > 0, d2 / G_left, 0.0)
        C = np.cumsum(inc, axis=0) - inc       # competing failures strictly before
        j = self.ev_pos
        return Y[j] + G_left[j] * C[j]

    def totals(self):
        Y = (self.n - self.first).astype(float)
        c1 = np.concatenate([[0.0], np.cumsum(self.is1)])
        c2 = np.concatenate([[0.0], np.cumsum(self.is2)])
        return Y, c1[self.last] - c1[self.first], c2[self.last] - c2[self.first]


def _logrank_many(grid: _EventGrid, masks) -> np.ndarray:
    """Log-rank chi-square for each boolean column of ``masks`` (nan if undefined)."""
    Yt, d1t, d2t = grid.totals()
    dt = (d1t + d2t)[:, None]
    Yt = Yt[:, None]
    Ya, d1a, d2a = grid._counts(masks)
    da = d1a + d2a
    with np.errstate(divide="ignore", invalid="ignore"):
        E = Ya * dt / Yt
        V = np.where(Yt > 1, Ya * (Yt - Ya) * dt * (Yt - dt) / (Yt ** 2 * (Yt - 1)), 0.0)
        z = (da - E).sum(axis=0)
        v = V.sum(axis=0)
        stat = np.where(v > 0, z * z / v, np.nan)
    return stat


def _gray_many(grid: _EventGrid, masks) -> np.ndarray:
    """Gray's rho=0 two-sample statistic for each column of ``masks``.

    Score: ``sum_t d1_A - d1 R_A / R`` over subdistribution risk sets
    ``R_g`` (see ``_EventGrid._weighted_risk``).  Variance: influence-function
    form with the common subdistribution hazard estimated under the null
    (see module notes in ``gray_stat``).
    """
    Yt, d1t, d2t = grid.totals()
    Ya, d1a, d2a = grid._counts(masks)
    masks = np.asarray(masks, bool)
    m = Ya.shape[1]
    groups = [(Ya, d1a, d2a, masks), (Yt[:, None] - Ya, d1t[:, None] - d1a, d2t[:, None] - d2a, ~masks)]
    parts = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for Y, d1, d2, mask in groups:
            frac = np.where(Y > 0, (d1 + d2) / Y, 0.0)
            S = np.cumprod(1.0 - frac, axis=0)
            S_left = np.vstack([np.ones((1, m)), S[:-1]])
            F2 = np.cumsum(S_left * np.where(Y > 0, d2 / Y, 0.0), axis=0)
            F2_left = np.vstack([np.zeros((1, m)), F2[:-1]])
            parts.append((Y, d1, d2, grid._weighted_risk(mask), F2_left))
        (YA, d1A, _, RA, _), (YB, _, _, RB, _) = parts
        R = RA + RB
        d1 = d1t[:, None]
        score = np.where(R > 0, d1A - d1 * RA / R, 0.0).sum(axis=0)

        dgam = np.where(R > 0, d1 / R, 0.0)
        F0 = 1.0 - np.cumprod(1.0 - dgam, axis=0)
        F0_left = np.vstack([np.zeros((1, m)), F0[:-1]])
        K = np.where(R > 0, RA * RB / R, 0.0)
        surv0_left = 1.0 - F0_left
        incr = np.where(surv0_left > 1e-12, K * dgam / surv0_left, 0.0)
        # J(u) = sum_{t > u} K(t) dGamma0(t) / (1 - F0(t))
        J = np.cumsum(incr[::-1], axis=0)[::-1] - incr
        ties = np.where(R > 1, (R - d1) / (R - 1), 1.0)
        var = np.zeros(m)
        for Y, _, d2g, Rg, F2l in parts:
            # S_g / (1 - F1_g) written as Y_g / R_g to avoid cancellation in the tail
            a = np.where(Rg > 0, K * Y / Rg, 0.0) - F2l * J
            b = (1.0 - F0) * J
            var += np.where(Y > 0, a * a * Rg * dgam * ties / Y ** 2, 0.0).sum(axis=0)
            var += np.where(Y > 0, b * b * d2g / Y ** 2, 0.0).sum(axis=0)
        stat = np.where((var > 0) & (d1t.sum() > 0), score * score / var, np.nan)
    return stat


def _check_groups(groups):
    groups = np.asarray(groups).ravel()
    labels = np.unique(groups)
    if labels.size != 2:
        raise ValueError(f"exactly two non-empty groups required, got {labels.size}")
    return groups == labels[0]


def logrank_stat(groups, times, status):
    """Two-sample log-rank chi-square ``(O - E)^2 / V`` or None if undefined.

    ``status`` may be boolean (event) or a cause code (> 0 is an event).
    """
    mask = _check_groups(groups)
    times, status = _as_arrays(times, status)
    events = (np.asarray(status).astype(np.int64) > 0).astype(np.int64)
    if events.sum() == 0:
        return None
    grid = _EventGrid(times, events, 1)
    val = _logrank_many(grid, mask[:, None])[0]
    return None if np.isnan(val) else float(val)


def gray_stat(groups, times, causes, cause=1):
    """Gray's two-sample test (rho = 0) comparing cause-``cause`` incidence.

    Subjects failing from a competing cause stay in the subdistribution risk
    set of their group with weight ``G_g(t-) / G_g(T_i-)``, ``G_g`` the
    censoring Kaplan-Meier within group g.  The variance plugs the pooled null subdistribution hazard into
    the influence-function expansion of the Aalen-Johansen estimator; with no
    competing events it reduces to the hypergeometric log-rank variance.
    Returns None when there are no cause-``cause`` events.
    """
    mask = _check_groups(groups)
    times, causes = _as_arrays(times, causes)
    causes = np.asarray(causes).astype(np.int64)
    if np.count_nonzero(causes == cause) == 0:
        return None
    grid = _EventGrid(times, causes, cause)
    val = _gray_many(grid, mask[:, None])[0]
    return None if np.isnan(val) else float(val)


# ---------------------------------------------------------------------------
# Censoring distribution and IPCW
# ---------------------------------------------------------------------------

def censoring_survival(times, causes) -> SurvCurve:
    """Kaplan-Meier estimate of the censoring survivor function ``G``.

    Events at a tied time leave the risk set before censorings at that time.
    """
    times, causes = _as_arrays(times, causes)
    causes = np.asarray(causes).astype(np.int64)
    cens = causes == 0
    c_times = np.unique(times[cens])
    if c_times.size == 0:
        return SurvCurve(np.empty(0), np.empty(0))
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, c_times, side="left")
    ev_sorted = np.sort(times[~cens])
    ev_at = np.searchsorted(ev_sorted, c_times, side="right") - np.searchsorted(ev_sorted, c_times, side="left")
    cs = np.sort(times[cens])
    c = np.searchsorted(cs, c_times, side="right") - np.searchsorted(cs, c_times, side="left")
    return SurvCurve(c_times, np.cumprod(1.0 - c / (at_risk - ev_at)))


def censoring_weights(times, causes, t, s=None, G=None) -> np.ndarray:
    """IPCW weights at time ``t`` (optionally from landmark ``s``).

    ``w_i(t) = I(T_i <= t, cause_i != 0) / G(T_i-) + I(T_i > t) / G(t)``.
    With a landmark, weights are multiplied by ``I(T_i > s)`` and ``G`` is
    conditioned on remaining uncensored past ``s``.  ``G`` defaults to the
    censoring Kaplan-Meier of the given sample.

    Raises
    ------
    NonEstimableError
        ``G`` is zero where a weight needs it.
    """
    times = np.asarray(times, float)
    causes = np.asarray(causes).astype(np.int64)
    if G is None:
        G = censoring_survival(times, causes)
    t = float(t)
    g_t = float(G(t))
    g_left = G.left(times)
    event_by_t = (times <= t) & (causes != 0)
    beyond = times > t
    norm = 1.0
    include = np.ones(times.size, dtype=bool)
    if s is not None:
        include = times > s
        norm = float(G(s))
        if norm <= 0:
            raise NonEstimableError(f"censoring survival is zero at landmark {s}")
    need_t = beyond & include
    if need_t.any() and g_t <= 0:
        raise NonEstimableError(f"censoring survival is zero at t={t}")
    need_left = event_by_t & include
    if np.any(g_left[need_left] <= 0):
        raise NonEstimableError("censoring survival is zero before an observed event")
    w = np.zeros(times.size)
    with np.errstate(divide="ignore"):
        w[need_left] = norm / g_left[need_left]
        if need_t.any():
            w[need_t] = norm / g_t
    return w
