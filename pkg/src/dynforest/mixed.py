"""Linear mixed models fitted by profiled maximum likelihood.

For one marker the model is ``Y_ij = X(t_ij) beta + Z(t_ij) b_i + eps_ij`` with
``b_i ~ N(0, B)`` and ``eps_ij ~ N(0, sigma2)``; ``Z`` is a subset of the
columns of ``X``.  Everything the likelihood needs is carried by per-subject
cross products (``X_i'X_i``, ``X_i'y_i``, ``y_i'y_i``), so node subsets and
bootstrap resamples reduce to gathering rows of :class:`MarkerStats`.

The optimiser works on the relative covariance ``B / sigma2 = L L'`` with
``L`` an unconstrained lower-triangular factor; ``beta`` and ``sigma2`` are
profiled out in closed form.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sps
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DataValidationError, InsufficientDataError, RankDeficientError
from .splines import default_knots, natural_spline_basis

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LmmSpec:
    """Time basis of the fixed and random parts of one marker's model.

    ``basis`` is ``"ns"`` (intercept plus natural cubic spline of time) or
    ``"poly"`` (intercept plus raw powers up to ``degree``).  ``random`` lists
    the columns of the fixed design (0 = intercept) that carry random
    effects; ``None`` means all of them.
    """

    basis: str = "ns"
    degree: int = 1
    n_knots: int = 1
    knots: tuple[float, ...] | None = None
    boundary_knots: tuple[float, float] | None = None
    random: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.basis not in ("ns", "poly"):
            raise DataValidationError(f"unknown basis {self.basis!r}")
        if self.basis == "poly" and self.degree < 0:
            raise DataValidationError("poly degree must be >= 0")
        if self.random is not None:
            r = tuple(self.random)
            if len(r) == 0 or len(set(r)) != len(r) or min(r) < 0 or max(r) >= self.n_fixed:
                raise DataValidationError(
                    f"random columns {r} must be distinct columns of the {self.n_fixed}-column fixed basis")

    @property
    def n_fixed(self) -> int:
        if self.basis == "poly":
            return self.degree + 1
        k = self.n_knots if self.knots is None else len(self.knots)
        return k + 2

    @property
    def random_columns(self) -> tuple[int, ...]:
        return tuple(range(self.n_fixed)) if self.random is None else tuple(self.random)

    @property
    def n_random(self) -> int:
        return len(self.random_columns)

    @property
    def is_resolved(self) -> bool:
        return self.basis == "poly" or (self.knots is not None and self.boundary_knots is not None)

    def resolve(self, pooled_times) -> "LmmSpec":
        """Fix knots from pooled training measurement times where unspecified."""
        if self.is_resolved:
            return self
        knots, boundary = default_knots(pooled_times, self.n_knots)
        return replace(self,
                       knots=tuple(knots) if self.knots is None else tuple(self.knots),
                       boundary_knots=boundary if self.boundary_knots is None else tuple(self.boundary_knots))

    def design(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.basis == "poly":
            return np.vander(t, self.degree + 1, increasing=True)
        if not self.is_resolved:
            raise DataValidationError("spline knots unresolved; call resolve() first")
        ns = natural_spline_basis(t, self.knots, self.boundary_knots)
        return np.column_stack([np.ones(t.size), ns])

    def to_dict(self) -> dict:
        return {
            "basis": self.basis, "degree": int(self.degree), "n_knots": int(self.n_knots),
            "knots": None if self.knots is None else [float(k) for k in self.knots],
            "boundary_knots": None if self.boundary_knots is None else [float(k) for k in self.boundary_knots],
            "random": None if self.random is None else [int(r) for r in self.random],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmmSpec":
        d = dict(d or {})
        for key in ("knots", "boundary_knots", "random"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class MixedModelFit:
    beta: np.ndarray
    re_cov: np.ndarray
    resid_var: float
    loglik: float
    converged: bool
    n_subjects: int
    n_obs: int
    n_iter: int = 0

    def to_dict(self) -> dict:
        return {
            "beta": [float(v) for v in self.beta],
            "re_cov": [[float(v) for v in row] for row in self.re_cov],
            "resid_var": float(self.resid_var),
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "n_subjects": int(self.n_subjects),
            "n_obs": int(self.n_obs),
            "n_iter": int(self.n_iter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixedModelFit":
        return cls(np.asarray(d["beta"], float), np.asarray(d["re_cov"], float).reshape(
            len(d["re_cov"]), -1), float(d["resid_var"]), float(d["loglik"]), bool(d["converged"]),
            int(d["n_subjects"]), int(d["n_obs"]), int(d.get("n_iter", 0)))


@dataclass(frozen=True, eq=False)
class MarkerStats:
    """Per-subject cross products of one marker's fixed design and values."""

    xtx: np.ndarray   # (S, p, p)
    xty: np.ndarray   # (S, p)
    yty: np.ndarray   # (S,)
    nobs: np.ndarray  # (S,)
    random: tuple[int, ...] = field(default=())

    @classmethod
    def from_table(cls, table, spec: LmmSpec) -> "MarkerStats":
        n = table.n_subjects
        p = spec.n_fixed
        if len(table.times) == 0:
            return cls(np.zeros((n, p, p)), np.zeros((n, p)), np.zeros(n),
                       np.zeros(n, dtype=np.int64), spec.random_columns)
        X = spec.design(table.times)
        y = table.values
        agg = sps.csr_matrix((np.ones(len(y)), (table.subject_index, np.arange(len(y)))),
                             shape=(n, len(y)))
        outer = (X[:, :, None] * X[:, None, :]).reshape(len(y), p * p)
        xtx = np.asarray(agg @ outer).reshape(n, p, p)
        xty = np.asarray(agg @ (X * y[:, None]))
        yty = np.asarray(agg @ (y * y)).ravel()
        return cls(xtx, xty, yty, table.counts.astype(np.int64), spec.random_columns)

    @property
    def n_subjects(self) -> int:
        return len(self.nobs)

    def take(self, idx) -> "MarkerStats":
        idx = np.asarray(idx, dtype=np.int64)
        return MarkerStats(self.xtx[idx], self.xty[idx], self.yty[idx], self.nobs[idx], self.random)

    def random_blocks(self):
        r = list(self.random)
        ztz = self.xtx[:, r][:, :, r]
        ztx = self.xtx[:, r, :]
        zty = self.xty[:, r]
        return ztz, ztx, zty


def _tril_from_theta(theta, q):
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta
    return L


def _theta_from_cov(rel_cov):
    q = rel_cov.shape[0]
    rel = 0.5 * (rel_cov + rel_cov.T)
    try:
        return np.linalg.cholesky(rel)[np.tril_indices(q)]
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(rel)
    rel = (v * np.maximum(w, 0.0)) @ v.T + 1e-8 * np.eye(q)
    return np.linalg.cholesky(rel)[np.tril_indices(q)]


class _Profile:
    """Profiled ML deviance of a node's data as a function of ``theta``."""

    def __init__(self, stats: MarkerStats):
        keep = stats.nobs > 0
        s = stats.take(np.flatnonzero(keep))
        self.n_obs = int(s.nobs.sum())
        self.n_subjects = int(keep.sum())
        self.q = len(stats.random)
        self.p = stats.xtx.shape[1]
        ztz, ztx, zty = s.random_blocks()
        self.ztz = ztz
        self.zc = np.concatenate([ztx, zty[:, :, None]], axis=2)   # (S, q, p+1)
        p = self.p
        omega = np.empty((p + 1, p + 1))
        omega[:p, :p] = s.xtx.sum(axis=0)
        omega[:p, p] = omega[p, :p] = s.xty.sum(axis=0)
        omega[p, p] = s.yty.sum()
        self.omega = omega

    def evaluate(self, theta, gradient=False):
        q, p = self.q, self.p
        L = _tril_from_theta(theta, q)
        GL = self.ztz @ L                                   # (S, q, q)
        M = np.einsum("ji,sjk->sik", L, GL) + np.eye(q)
        chol = np.linalg.cholesky(M)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
        P = np.einsum("ji,sjc->sic", L, self.zc)
        W = np.linalg.solve(M, P)
        om = self.omega - np.einsum("sia,sib->ab", P, W)
        beta = np.linalg.solve(om[:p, :p], om[:p, p])
        r2 = om[p, p] - om[:p, p] @ beta
        r2 = max(r2, self.n_obs * 1e-300)
        sigma2 = r2 / self.n_obs
        dev = logdet + self.n_obs * (1.0 + LOG_2PI + math.log(sigma2))
        if not gradient:
            return dev, beta, sigma2
        # d log|M_i| / dL = 2 G_i L M_i^-1 ; d r2 / dL = -2 sum (c_i - G_i L u_i) u_i'
        Minv = np.linalg.inv(M)
        g_logdet = 2.0 * np.einsum("sij,sjk->ik", GL, Minv)
        c = self.zc[:, :, p] - self.zc[:, :, :p] @ beta     # Z_i'(y_i - X_i beta)
        u = W[:, :, p] - W[:, :, :p] @ beta                 # M_i^-1 L' c_i
        resid = c - np.einsum("sij,sj->si", GL, u)
        g_r2 = -2.0 * np.einsum("si,sj->ij", resid, u)
        grad = g_logdet + (self.n_obs / r2) * g_r2
        return dev, beta, sigma2, grad[np.tril_indices(q)]

    def deviance(self, theta):
        try:
            return self.evaluate(theta)[0]
        except np.linalg.LinAlgError:
            return np.inf

    def deviance_and_grad(self, theta):
        try:
            dev, _, _, grad = self.evaluate(theta, gradient=True)
            return dev, grad
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(theta)


def _moment_init(stats: MarkerStats):
    """Method-of-moments starting values: OLS, then per-subject residual fits."""
    keep = stats.nobs > 0
    s = stats.take(np.flatnonzero(keep))
    xtx = s.xtx.sum(axis=0)
    beta = np.linalg.solve(xtx, s.xty.sum(axis=0))
    rss = s.yty.sum() - 2 * beta @ s.xty.sum(axis=0) + beta @ xtx @ beta
    total_var = max(rss / max(s.nobs.sum(), 1), 1e-12)
    ztz, ztx, zty = s.random_blocks()
    q = ztz.shape[1]
    ztr = zty - ztx @ beta
    ok = s.nobs > q
    b, within = [], []
    for i in np.flatnonzero(ok):
        try:
            bi = np.linalg.solve(ztz[i], ztr[i])
        except np.linalg.LinAlgError:
            continue
        b.append(bi)
    if len(b) >= q + 2:
        b = np.array(b)
        cov = np.cov(b, rowvar=False).reshape(q, q)
        sigma2 = total_var * 0.5
        return _theta_from_cov(cov / sigma2)
    return _theta_from_cov(np.eye(q))


def marginal_loglik(stats: MarkerStats, beta, re_cov, resid_var) -> float:
    """Gaussian marginal log-likelihood at given (not profiled) parameters."""
    ztz, ztx, zty = stats.random_blocks()
    q = ztz.shape[1]
    n = stats.nobs.astype(float)
    beta = np.asarray(beta, float)
    B = np.asarray(re_cov, float)
    rr = stats.yty - 2 * stats.xty @ beta + np.einsum("a,sab,b->s", beta, stats.xtx, beta)
    ztr = zty - ztx @ beta
    A = np.einsum("sij,jk->sik", ztz, B) + resid_var * np.eye(q)      # Z'Z B + s2 I
    sign, logdet_a = np.linalg.slogdet(A)
    logdet_v = (n - q) * math.log(resid_var) + logdet_a
    u = np.linalg.solve(A, ztr[:, :, None])[:, :, 0]
    quad = (rr - np.einsum("si,ij,sj->s", ztr, B, u)) / resid_var
    return float(-0.5 * np.sum(n * LOG_2PI + logdet_v + quad))


def fit_lmm(stats: MarkerStats, init: MixedModelFit | None = None, q_min: int = 10,
            max_iter: int = 200, tol: float = 1e-6) -> MixedModelFit:
    """Maximum-likelihood fit of one marker's mixed model on a node's subjects.

    Parameters
    ----------
    stats : MarkerStats
        Cross products for the node's subjects (duplicates allowed).
    init : MixedModelFit, optional
        Warm start, typically the closest ancestor node's fit.
    q_min : int
        Minimum number of subjects with at least one measurement.

    Raises
    ------
    InsufficientDataError
        Fewer than ``q_min`` subjects have measurements.
    RankDeficientError
        The pooled fixed-effect design is singular at this node.
    """
    n_with = int(np.count_nonzero(stats.nobs))
    if n_with < max(q_min, 1):
        raise InsufficientDataError(f"{n_with} subjects with measurements (< {q_min})")
    prof = _Profile(stats)
    xtx = prof.omega[:-1, :-1]
    w = np.linalg.eigvalsh(xtx)
    if w[0] <= 1e-10 * max(w[-1], 1e-300):
        raise RankDeficientError("fixed-effect design is rank deficient at this node")

    q = prof.q
    if init is not None:
        theta0 = _theta_from_cov(np.asarray(init.re_cov) / init.resid_var)
    else:
        theta0 = _moment_init(stats)
    f0 = prof.deviance(theta0)
    if not np.isfinite(f0):
        theta0 = _theta_from_cov(np.eye(q))
        f0 = prof.deviance(theta0)

    res = minimize(prof.deviance_and_grad, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-5})
    theta, converged, nit = res.x, bool(res.success), int(res.nit)
    if not np.isfinite(res.fun) or res.fun > f0:
        theta = theta0
    dev, beta, sigma2 = prof.evaluate(theta)
    L = _tril_from_theta(theta, q)
    B = sigma2 * (L @ L.T)
    B = 0.5 * (B + B.T)
    return MixedModelFit(beta=beta, re_cov=B, resid_var=float(sigma2), loglik=float(-0.5 * dev),
                         converged=converged, n_subjects=prof.n_subjects, n_obs=prof.n_obs,
                         n_iter=nit)


def blup_from_stats(fit: MixedModelFit, stats: MarkerStats) -> np.ndarray:
    """Predicted random effects ``B Z'(Z B Z' + s2 I)^-1 (y - X beta)`` per subject."""
    ztz, ztx, zty = stats.random_blocks()
    q = ztz.shape[1]
    B = fit.re_cov
    ztr = zty - ztx @ fit.beta
    A = np.einsum("sij,jk->sik", ztz, B) + fit.resid_var * np.eye(q)
    u = np.linalg.solve(A, ztr[:, :, None])[:, :, 0]
    return u @ B.T


def blup(fit: MixedModelFit, times, values, spec: LmmSpec) -> np.ndarray:
    """BLUP of one subject's random effects from its measurement series."""
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    q = spec.n_random
    if times.size == 0:
        return np.zeros(q)
    X = spec.design(times)
    Z = X[:, list(spec.random_columns)]
    V = Z @ fit.re_cov @ Z.T + fit.resid_var * np.eye(times.size)
    return fit.re_cov @ Z.T @ np.linalg.solve(V, values - X @ fit.beta)


class LinearMixedModel(BaseEstimator, TransformerMixin):
    """Scikit-learn style wrapper: ``fit`` on long data, ``transform`` to BLUPs.

    ``X`` is the vector of measurement times, ``y`` the measured values and
    ``groups`` the subject label of each row.  ``transform`` returns one row
    of predicted random effects per distinct group (sorted group order).
    """

    def __init__(self, spec=None, q_min=10, max_iter=200, tol=1e-6):
        self.spec = spec
        self.q_min = q_min
        self.max_iter = max_iter
        self.tol = tol

    def _stats(self, X, y, groups):
        from .data import MarkerTable

        t = np.asarray(X, float).ravel()
        y = np.asarray(y, float).ravel()
        groups = np.asarray(groups)
        if not (len(t) == len(y) == len(groups)):
            raise DataValidationError("times, values and groups must have the same length")
        labels, inv = np.unique(groups, return_inverse=True)
        order = np.lexsort((t, inv))
        counts = np.bincount(inv, minlength=len(labels))
        table = MarkerTable(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
                            t[order], y[order])
        return labels, table

    def fit(self, X, y, groups, init=None):
        spec = self.spec if self.spec is not None else LmmSpec()
        labels, table = self._stats(X, y, groups)
        self.spec_ = spec.resolve(table.times)
        self.fit_ = fit_lmm(MarkerStats.from_table(table, self.spec_), init=init,
                            q_min=self.q_min, max_iter=self.max_iter, tol=self.tol)
        self.beta_ = self.fit_.beta
        self.re_cov_ = self.fit_.re_cov
        self.resid_var_ = self.fit_.resid_var
        self.loglik_ = self.fit_.loglik
        return self

    def transform(self, X, y, groups):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "fit_")
        labels, table = self._stats(X, y, groups)
        self.groups_ = labels
        return blup_from_stats(self.fit_, MarkerStats.from_table(table, self.spec_))

    def fit_transform(self, X, y, groups):
        return self.fit(X, y, groups).transform(X, y, groups)
