"""Synthetic longitudinal survival data with latent-class marker trajectories.

Each subject belongs to one of ``n_classes`` latent classes.  Marker ``m``
follows ``mu_cm(t) + b0_im + b1_im t + eps`` where ``mu_cm`` is a class
specific linear (or quadratic) mean and ``(b0, b1)`` are Gaussian random
effects.  Visits happen at baseline and near each anniversary ``j`` at
``j + Exp(rate)`` and are kept only up to the observed time.

Event times come from a proportional hazards model with Weibull baseline
by inverse transform.  The linear predictor is either the latent class
(``association="latent_class"``) or the random effects of the informative
markers plus their pairwise products (``association="random_effects"``).
An optional constant-hazard competing cause turns the data into K = 2.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .data import CATEGORICAL, CONTINUOUS, Covariate, LongitudinalDataset, MarkerTable, Schema
from .exceptions import DataValidationError

ASSOCIATIONS = ("latent_class", "random_effects")
HAZARD_FORMS = ("scale", "rate")


@dataclass(frozen=True)
class SimConfig:
    """Generator settings.

    With ``hazard_form="scale"`` the baseline cumulative hazard is
    ``(t / scale) ** shape``; with ``"rate"`` it is ``scale * t ** shape``.
    """

    n_subjects: int = 500
    n_markers: int = 2
    n_classes: int = 4
    class_probs: tuple[float, ...] | None = None
    trajectory: str = "linear"
    class_separation: float = 1.0
    re_sd: tuple[float, float] = (0.8, 0.25)
    re_corr: float = 0.0
    resid_sd: float = 0.5
    n_visits: int = 10
    jitter_rate: float = 5.0
    weibull_shape: float = 0.1
    weibull_scale: float = 2.0
    hazard_form: str = "scale"
    association: str = "latent_class"
    baseline_log_hazard: float = -0.5
    class_effects: tuple[float, ...] = (-1.5, -0.5, 0.5, 1.5)
    n_informative: int = 2
    re_effects: tuple[float, float] = (0.8, 2.0)
    interaction_effect: float = 0.3
    association_scale: float = 1.0
    covariate_effects: tuple[float, float] = (0.0, 0.0)
    competing_rate: float = 0.0
    censor_range: tuple[float, float] = (2.0, 10.0)
    horizon: float = 10.0
    design_seed: int = 20240101
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise DataValidationError("n_subjects must be >= 1")
        if self.n_markers < 0 or self.n_classes < 1:
            raise DataValidationError("n_markers must be >= 0 and n_classes >= 1")
        if self.weibull_shape <= 0 or self.weibull_scale <= 0:
            raise DataValidationError("weibull parameters must be > 0")
        if self.hazard_form not in HAZARD_FORMS:
            raise DataValidationError(f"hazard_form must be one of {HAZARD_FORMS}")
        if self.association not in ASSOCIATIONS:
            raise DataValidationError(f"association must be one of {ASSOCIATIONS}")
        if self.trajectory not in ("linear", "nonlinear"):
            raise DataValidationError("trajectory must be 'linear' or 'nonlinear'")
        if self.class_probs is not None:
            p = np.asarray(self.class_probs, float)
            if p.size != self.n_classes or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise DataValidationError("class_probs must have n_classes entries summing to 1")
        if self.association == "latent_class" and len(self.class_effects) != self.n_classes:
            raise DataValidationError("class_effects must have n_classes entries")
        if self.association == "random_effects" and self.n_informative > self.n_markers:
            raise DataValidationError("n_informative exceeds n_markers")
        lo, hi = self.censor_range
        if not 0 < lo <= hi or self.horizon <= 0:
            raise DataValidationError("censor_range must satisfy 0 < low <= high and horizon > 0")
        if self.competing_rate < 0:
            raise DataValidationError("competing_rate must be >= 0")
        if not self.baseline_log_hazard > -700:
            raise DataValidationError("baseline_log_hazard too small: no events expected")

    @property
    def n_causes(self) -> int:
        return 2 if self.competing_rate > 0 else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataValidationError(f"unknown simulation keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class Truth:
    """Hidden quantities behind a simulated dataset."""

    ids: list
    latent_class: np.ndarray
    event_time: np.ndarray
    competing_time: np.ndarray
    censor_time: np.ndarray
    linear_predictor: np.ndarray
    random_effects: np.ndarray    # (N, Q, 2)

    def write_csv(self, path) -> None:
        Q = self.random_effects.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "class", "true_event_time", "competing_time", "censor_time", "eta"]
                       + [f"{n}_m{m + 1}" for m in range(Q) for n in ("b0", "b1")])
            for i, sid in enumerate(self.ids):
                w.writerow([sid, int(self.latent_class[i]), repr(float(self.event_time[i])),
                            repr(float(self.competing_time[i])), repr(float(self.censor_time[i])),
                            repr(float(self.linear_predictor[i]))]
                           + [repr(float(v)) for v in self.random_effects[i].ravel()])


def class_means(cfg: SimConfig) -> np.ndarray:
    """Class mean coefficients, shape (Q, C, 3): intercept, slope, quadratic.

    Drawn from ``design_seed`` so they are shared by every replication.
    """
    rng = np.random.default_rng(cfg.design_seed)
    Q, C = cfg.n_markers, cfg.n_classes
    sep = cfg.class_separation
    coef = np.zeros((Q, C, 3))
    for m in range(Q):
        coef[m, :, 0] = sep * rng.permutation(np.linspace(-1.5, 1.5, C))
        coef[m, :, 1] = sep * rng.permutation(np.linspace(-0.3, 0.3, C))
        if cfg.trajectory == "nonlinear":
            coef[m, :, 2] = sep * rng.permutation(np.linspace(-0.03, 0.03, C))
    return coef


def baseline_cumhaz(t, cfg: SimConfig):
    t = np.asarray(t, float)
    a, b = cfg.weibull_shape, cfg.weibull_scale
    if cfg.hazard_form == "scale":
        return (t / b) ** a
    return b * t ** a


def baseline_cumhaz_inverse(h, cfg: SimConfig):
    h = np.asarray(h, float)
    a, b = cfg.weibull_shape, cfg.weibull_scale
    if cfg.hazard_form == "scale":
        return b * h ** (1.0 / a)
    return (h / b) ** (1.0 / a)


def _visit_times(rng, n, cfg):
    jitter = np.minimum(rng.exponential(1.0 / cfg.jitter_rate, size=(n, cfg.n_visits)), 0.999)
    return np.column_stack([np.zeros(n), np.arange(1, cfg.n_visits + 1) + jitter])


def _linear_predictor(cfg, cls, re, X):
    eta = np.full(cls.size, float(cfg.baseline_log_hazard))
    s = cfg.association_scale
    if cfg.association == "latent_class":
        eta += s * np.asarray(cfg.class_effects, float)[cls]
    else:
        feats = re[:, :cfg.n_informative, :].reshape(cls.size, -1)
        eta += s * (feats[:, 0::2] * cfg.re_effects[0] + feats[:, 1::2] * cfg.re_effects[1]).sum(axis=1)
        for a, b in itertools.combinations(range(feats.shape[1]), 2):
            eta += s * cfg.interaction_effect * feats[:, a] * feats[:, b]
    eta += X @ np.asarray(cfg.covariate_effects, float)
    return eta


def simulation_schema(cfg: SimConfig) -> Schema:
    covs = (Covariate("x1", CONTINUOUS), Covariate("x2", CATEGORICAL, ("0", "1")))
    markers = tuple(f"y{m + 1}" for m in range(cfg.n_markers))
    return Schema(covs, markers, cfg.n_causes)


def simulate_dataset(cfg: SimConfig, seed=None) -> tuple[LongitudinalDataset, Truth]:
    """Draw one dataset and its hidden truth.

    ``seed`` (an int, SeedSequence or Generator) overrides ``cfg.seed``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        cfg.seed if seed is None else seed)
    N, Q, C = cfg.n_subjects, cfg.n_markers, cfg.n_classes
    probs = np.full(C, 1.0 / C) if cfg.class_probs is None else np.asarray(cfg.class_probs, float)
    cls = rng.choice(C, size=N, p=probs)
    X = np.column_stack([rng.standard_normal(N), rng.binomial(1, 0.5, N)]).astype(float)

    sd = np.asarray(cfg.re_sd, float)
    cov = np.diag(sd ** 2)
    cov[0, 1] = cov[1, 0] = cfg.re_corr * sd[0] * sd[1]
    re = rng.multivariate_normal(np.zeros(2), cov, size=(N, Q)) if Q else np.zeros((N, 0, 2))

    eta = _linear_predictor(cfg, cls, re, X)
    T = baseline_cumhaz_inverse(rng.exponential(1.0, N) * np.exp(-eta), cfg)
    comp = rng.exponential(1.0 / cfg.competing_rate, N) if cfg.competing_rate > 0 else np.full(N, np.inf)
    cens = np.minimum(rng.uniform(*cfg.censor_range, N), cfg.horizon)
    obs = np.minimum.reduce([T, comp, cens])
    cause = np.where(obs == T, 1, np.where(obs == comp, 2, 0))
    if not np.any(cause > 0):
        raise DataValidationError("simulation produced no events; check the hazard settings")

    visits = _visit_times(rng, N, cfg)
    coef = class_means(cfg)
    tables = []
    for m in range(Q):
        mu = coef[m, cls]
        t = visits
        y = (mu[:, [0]] + mu[:, [1]] * t + mu[:, [2]] * t ** 2
             + re[:, m, [0]] + re[:, m, [1]] * t
             + cfg.resid_sd * rng.standard_normal(t.shape))
        keep = t <= obs[:, None]
        counts = keep.sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        tables.append(MarkerTable(offsets, t[keep], y[keep]))

    ids = [f"S{i + 1:05d}" for i in range(N)]
    ds = LongitudinalDataset(simulation_schema(cfg), ids, obs, cause, X, tables)
    truth = Truth(ids, cls, T, comp, cens, eta, re)
    return ds, truth


def make_replications(cfg: SimConfig, R: int = 25, n_external: int | None = None):
    """``R`` learning datasets and one external dataset from spawned seeds.

    Returns ``(learning, external)`` where ``learning`` is a list of
    ``(dataset, truth)`` pairs and ``external`` one such pair.
    """
    if R < 1:
        raise DataValidationError("R must be >= 1")
    children = np.random.SeedSequence(cfg.seed).spawn(R + 1)
    learning = [simulate_dataset(cfg, np.random.default_rng(c)) for c in children[:R]]
    ext_cfg = cfg if n_external is None else replace(cfg, n_subjects=int(n_external))
    external = simulate_dataset(ext_cfg, np.random.default_rng(children[R]))
    return learning, external


def write_simulation(ds, truth, directory, prefix="sim") -> dict[str, Path]:
    from .data import write_dataset_files

    directory = Path(directory)
    paths = write_dataset_files(ds, directory, prefix)
    paths["truth"] = directory / f"{prefix}_truth.csv"
    truth.write_csv(paths["truth"])
    return paths
