"""Random survival forest over node-level BLUP features, plus the RC baseline.

``mode="dynforest"`` fits the markers' mixed models inside every node.
``mode="rc"`` (regression calibration) fits each marker's mixed model once
on the whole learning sample, appends the predicted random effects as fixed
covariates and grows ordinary time-fixed trees on them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import LongitudinalDataset
from .exceptions import DataValidationError, ModelFormatError, SchemaMismatchError
from .mixed import LmmSpec, MarkerStats, MixedModelFit, blup_from_stats, fit_lmm
from .tree import SurvivalTree, TreeData, TreeParams, build_tree

log = logging.getLogger(__name__)

MODEL_FORMAT = "dynforest-model"
MODEL_VERSION = 1
MODES = ("dynforest", "rc")
EPS = 1e-12


def _spec_for(lmm, name):
    if lmm is None:
        return LmmSpec(basis="poly", degree=1)
    if isinstance(lmm, LmmSpec):
        return lmm
    if isinstance(lmm, dict) and name in lmm:
        spec = lmm[name]
    elif isinstance(lmm, dict) and "default" in lmm:
        spec = lmm["default"]
    elif isinstance(lmm, dict) and set(lmm) <= set(LmmSpec.__dataclass_fields__):
        spec = lmm
    else:
        return LmmSpec(basis="poly", degree=1)
    return spec if isinstance(spec, LmmSpec) else LmmSpec.from_dict(spec)


def _grow(data, N, params, seed, b):
    rng = np.random.default_rng([seed, b])
    rows = rng.integers(0, N, size=N)
    tree = build_tree(data, rows, params, rng)
    return np.bincount(rows, minlength=N), tree


def landmark_probability(cif_s, cif_sw):
    """Probability of each cause in ``(s, s + w]`` given event-free at ``s``.

    ``cif_s`` and ``cif_sw`` have shape (..., K).  The numerator is floored
    at 0 and entries whose denominator is <= ``EPS`` are NaN.
    """
    denom = 1.0 - cif_s.sum(axis=-1, keepdims=True)
    num = np.maximum(cif_sw - cif_s, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > EPS, num / denom, np.nan)
    return np.minimum(out, 1.0)


class DynamicForest(BaseEstimator):
    """Competing-risk random survival forest for longitudinal predictors.

    Parameters
    ----------
    n_estimators : int
        Number of trees B.
    mtry : int or None
        Predictors drawn per node; defaults to ``ceil(sqrt(n_predictors))``.
        In RC mode every random-effect column counts as one predictor.
    minsplit : int
        Minimum number of events (of ``cause`` when K > 1) to split a node.
    nodesize : int
        Minimum number of subjects in each daughter node.
    cause : int
        Cause of interest for Gray's test when K > 1.
    mode : {"dynforest", "rc"}
    lmm : LmmSpec, dict or None
        Mixed-model basis per marker: a single spec, a mapping from marker
        name (or ``"default"``) to spec, or None for random intercept and
        slope in linear time.
    q_min : int
        Minimum subjects with measurements for a node-level fit.
    random_state : int or None
    n_jobs : int
        Trees grown concurrently; results do not depend on it.
    """

    def __init__(self, n_estimators=100, mtry=None, minsplit=5, nodesize=3, cause=1,
                 mode="dynforest", lmm=None, q_min=10, random_state=None, n_jobs=1):
        self.n_estimators = n_estimators
        self.mtry = mtry
        self.minsplit = minsplit
        self.nodesize = nodesize
        self.cause = cause
        self.mode = mode
        self.lmm = lmm
        self.q_min = q_min
        self.random_state = random_state
        self.n_jobs = n_jobs

    # -- fitting ----------------------------------------------------------
    def _validate_params(self, schema):
        if self.mode not in MODES:
            raise DataValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.n_estimators) < 1:
            raise DataValidationError("n_estimators must be >= 1")
        if not 1 <= int(self.cause) <= schema.n_causes:
            raise DataValidationError(f"cause must be in 1..{schema.n_causes}")
        for name in ("minsplit", "nodesize", "q_min"):
            if int(getattr(self, name)) < 1:
                raise DataValidationError(f"{name} must be >= 1")

    def fit(self, ds: LongitudinalDataset, y=None):
        if not isinstance(ds, LongitudinalDataset):
            raise DataValidationError("fit expects a LongitudinalDataset")
        schema = ds.schema
        self._validate_params(schema)
        if ds.n_subjects < 2:
            raise DataValidationError("need at least two subjects")
        seed = self.random_state
        if seed is None:
            seed = int(np.random.SeedSequence().generate_state(1)[0])
        self.seed_ = int(seed)
        self.schema_ = schema
        self.n_subjects_ = ds.n_subjects
        self.train_fingerprint_ = ds.fingerprint()
        self.specs_ = tuple(_spec_for(self.lmm, m).resolve(ds.markers[j].times)
                            for j, m in enumerate(schema.markers))
        self.rc_fits_ = None
        if self.mode == "rc":
            self.rc_fits_ = tuple(
                fit_lmm(MarkerStats.from_table(tab, spec), q_min=1)
                for tab, spec in zip(ds.markers, self.specs_))
        data = self.tree_data(ds)
        n_pred = data.n_predictors
        mtry = self.mtry if self.mtry is not None else max(1, math.ceil(math.sqrt(n_pred)))
        if not 1 <= int(mtry) <= n_pred:
            raise DataValidationError(f"mtry must be in 1..{n_pred}, got {mtry}")
        self.mtry_ = int(mtry)
        self.params_ = TreeParams(mtry=self.mtry_, minsplit=int(self.minsplit),
                                  nodesize=int(self.nodesize), cause=int(self.cause),
                                  q_min=int(self.q_min))
        B, N = int(self.n_estimators), ds.n_subjects
        jobs = (delayed(_grow)(data, N, self.params_, self.seed_, b) for b in range(B))
        out = Parallel(n_jobs=self.n_jobs, prefer="threads")(jobs)
        self.inbag_ = np.stack([o[0] for o in out]).astype(np.int64)
        self.trees_ = [o[1] for o in out]
        return self

    @property
    def oob_mask_(self) -> np.ndarray:
        return self.inbag_ == 0

    @property
    def feature_names_(self) -> tuple[str, ...]:
        """Predictor names in tree index order (RC: covariates then BLUP columns)."""
        s = self.schema_
        covs = tuple(c.name for c in s.covariates)
        if self.mode == "rc":
            return covs + tuple(f"{m}_b{r}" for m, spec in zip(s.markers, self.specs_)
                                for r in range(spec.n_random))
        return covs + tuple(s.markers)

    def predictor_of_feature(self, p: int) -> str:
        """Schema predictor a tree predictor index belongs to."""
        s = self.schema_
        if p < s.n_covariates:
            return s.covariates[p].name
        if self.mode == "rc":
            k = p - s.n_covariates
            for m, spec in zip(s.markers, self.specs_):
                if k < spec.n_random:
                    return m
                k -= spec.n_random
        return s.markers[p - s.n_covariates]

    # -- data plumbing ----------------------------------------------------
    def check_schema(self, ds: LongitudinalDataset) -> None:
        if ds.schema.digest() != self.schema_.digest():
            raise SchemaMismatchError("dataset schema differs from the one the model was trained on")

    def tree_data(self, ds: LongitudinalDataset) -> TreeData:
        categorical = [c.is_categorical for c in ds.schema.covariates]
        if self.mode != "rc":
            return TreeData.from_dataset(ds, self.specs_)
        cols = [ds.X]
        for tab, spec, fit in zip(ds.markers, self.specs_, self.rc_fits_):
            cols.append(blup_from_stats(fit, MarkerStats.from_table(tab, spec)))
        X = np.hstack(cols)
        cat = categorical + [False] * (X.shape[1] - ds.X.shape[1])
        return TreeData(X, cat, (), (), ds.event_time, ds.cause, ds.n_causes)

    # -- prediction -------------------------------------------------------
    def _leaf_matrix(self, data: TreeData) -> np.ndarray:
        return np.stack([t.apply(data) for t in self.trees_])

    def _accumulate(self, data, times, use):
        """Sum of tree CIFs at ``times`` over trees where ``use[b, i]``; and counts."""
        N, T, K = data.n_subjects, len(times), self.schema_.n_causes
        total = np.zeros((N, T, K))
        count = np.zeros(N)
        for b, tree in enumerate(self.trees_):
            rows = np.flatnonzero(use[b])
            if rows.size == 0:
                continue
            total[rows] += tree.predict_cif(data, times, rows)
            count[rows] += 1
        return total, count

    def predict_cif(self, ds: LongitudinalDataset, times) -> np.ndarray:
        """Ensemble CIFs, shape (N, T, K), averaged over all trees."""
        check_is_fitted(self, "trees_")
        self.check_schema(ds)
        times = np.atleast_1d(np.asarray(times, float))
        data = self.tree_data(ds)
        use = np.ones((len(self.trees_), ds.n_subjects), bool)
        total, count = self._accumulate(data, times, use)
        return total / count[:, None, None]

    def _check_training(self, ds):
        check_is_fitted(self, "trees_")
        if ds.fingerprint() != self.train_fingerprint_ and not self._same_subjects(ds):
            raise DataValidationError("out-of-bag prediction needs the training dataset")

    def _same_subjects(self, ds):
        return ds.n_subjects == self.n_subjects_ and ds.schema.digest() == self.schema_.digest()

    def predict_oob_cif(self, ds: LongitudinalDataset, times) -> np.ndarray:
        """OOB ensemble CIFs (N, T, K); rows of never-OOB subjects are NaN.

        ``ds`` is the training data, possibly with truncated or permuted
        marker histories.
        """
        self._check_training(ds)
        times = np.atleast_1d(np.asarray(times, float))
        total, count = self._accumulate(self.tree_data(ds), times, self.oob_mask_)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = total / count[:, None, None]
        if np.any(count == 0):
            log.warning("%d subjects are in-bag in every tree; OOB prediction undefined",
                        int(np.sum(count == 0)))
        return out

    def predict_dynamic(self, ds: LongitudinalDataset, s: float, w, oob=False) -> np.ndarray:
        """Landmark probabilities, shape (N, K) or (N, len(w), K) for array ``w``.

        Marker histories are truncated to measurements strictly before ``s``.
        Non-predictable entries (no mass left at ``s``) are NaN.
        """
        if s < 0:
            raise DataValidationError("landmark s must be >= 0")
        w_arr = np.atleast_1d(np.asarray(w, float))
        if np.any(w_arr < 0):
            raise DataValidationError("horizon w must be >= 0")
        trunc = ds.truncate(s)
        times = np.concatenate([[s], s + w_arr])
        cif = self.predict_oob_cif(trunc, times) if oob else self.predict_cif(trunc, times)
        out = landmark_probability(cif[:, :1, :], cif[:, 1:, :])
        return out[:, 0, :] if np.ndim(w) == 0 else out

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        params = {k: v for k, v in self.get_params().items() if k not in ("lmm", "n_jobs")}
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "schema": self.schema_.to_dict(),
            "schema_digest": self.schema_.digest(),
            "params": params,
            "seed": self.seed_,
            "mtry": self.mtry_,
            "specs": [s.to_dict() for s in self.specs_],
            "rc_fits": None if self.rc_fits_ is None else [f.to_dict() for f in self.rc_fits_],
            "n_subjects": self.n_subjects_,
            "train_fingerprint": self.train_fingerprint_,
            "inbag": [[int(c) for c in row] for row in self.inbag_],
            "trees": [t.to_dict() for t in self.trees_],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicForest":
        from .data import Schema

        if d.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"not a model file (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
        schema = Schema.from_dict(d["schema"])
        if schema.digest() != d["schema_digest"]:
            raise ModelFormatError("schema digest does not match the stored schema")
        specs = tuple(LmmSpec.from_dict(s) for s in d["specs"])
        forest = cls(lmm={m: s for m, s in zip(schema.markers, specs)}, **d["params"])
        forest.schema_ = schema
        forest.seed_ = int(d["seed"])
        forest.mtry_ = int(d["mtry"])
        forest.specs_ = specs
        forest.rc_fits_ = None if d["rc_fits"] is None else tuple(
            MixedModelFit.from_dict(f) for f in d["rc_fits"])
        forest.n_subjects_ = int(d["n_subjects"])
        forest.train_fingerprint_ = d["train_fingerprint"]
        forest.params_ = TreeParams(mtry=forest.mtry_, minsplit=int(forest.minsplit),
                                    nodesize=int(forest.nodesize), cause=int(forest.cause),
                                    q_min=int(forest.q_min))
        forest.inbag_ = np.asarray(d["inbag"], dtype=np.int64).reshape(len(d["trees"]), -1)
        n_feat = schema.n_covariates + (sum(s.n_random for s in specs) if forest.mode == "rc" else 0)
        n_mark = 0 if forest.mode == "rc" else schema.n_markers
        forest.trees_ = [SurvivalTree.from_dict(t, n_feat, n_mark, schema.n_causes) for t in d["trees"]]
        return forest

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "DynamicForest":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def fit_forest(ds, n_estimators=100, random_state=None, **params) -> DynamicForest:
    return DynamicForest(n_estimators=n_estimators, random_state=random_state, **params).fit(ds)


def fit_forest_rc(ds, n_estimators=100, random_state=None, **params) -> DynamicForest:
    return DynamicForest(n_estimators=n_estimators, random_state=random_state, mode="rc",
                         **params).fit(ds)


def save_model(forest: DynamicForest, path) -> None:
    forest.save(path)


def load_model(path) -> DynamicForest:
    return DynamicForest.load(path)
