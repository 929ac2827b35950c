"""Run configuration: one YAML file drives every CLI command.

Relative paths are resolved against the directory of the config file.
Command-line flags (``--seed``, ``--threads``, ``--mode``) override the
corresponding entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import DataValidationError
from .simulate import SimConfig

_TOP_KEYS = {"seed", "threads", "mode", "data", "external", "model", "output", "forest",
             "tune", "evaluation", "cv", "importance", "simulation", "benchmark", "predict"}
_FOREST_KEYS = {"n_estimators", "mtry", "minsplit", "nodesize", "cause", "q_min", "lmm"}


@dataclass
class DataPaths:
    fixed: Path
    long: Path
    schema: Path

    @classmethod
    def parse(cls, d, base: Path, what: str) -> "DataPaths | None":
        if d is None:
            return None
        if not isinstance(d, dict) or set(d) != {"fixed", "long", "schema"}:
            raise DataValidationError(f"{what} needs exactly the keys fixed, long, schema")
        return cls(*(base / str(d[k]) for k in ("fixed", "long", "schema")))

    def check_exist(self, what: str) -> None:
        for p in (self.fixed, self.long, self.schema):
            if not p.is_file():
                raise DataValidationError(f"{what}: file not found: {p}")

    def load(self):
        from .data import load_dataset, load_schema

        return load_dataset(self.fixed, self.long, load_schema(self.schema))


def _check_int(d, key, lo, hi=None, default=None):
    v = d.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int) or v < lo or (hi is not None and v > hi):
        rng = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
        raise DataValidationError(f"{key} must be an integer {rng}, got {v!r}")
    return v


def _check_float_list(d, key, default, lo=0.0):
    v = d.get(key, default)
    if not isinstance(v, (list, tuple)) or not v:
        raise DataValidationError(f"{key} must be a non-empty list")
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or x < lo:
            raise DataValidationError(f"{key} entries must be numbers >= {lo}, got {x!r}")
        out.append(float(x))
    return tuple(out)


@dataclass
class RunConfig:
    base: Path
    seed: int = 0
    threads: int = 1
    mode: str = "dynforest"
    data: DataPaths | None = None
    external: DataPaths | None = None
    model: Path | None = None
    output: Path | None = None
    forest: dict = field(default_factory=dict)
    tune_grid: tuple[int, ...] = ()
    tau: tuple[float | None, float | None] = (None, None)
    landmarks: tuple[float, ...] = (2.0, 4.0)
    horizons: tuple[float, ...] = (1.0, 2.0)
    cv_folds: int = 10
    cv_repeats: int = 1
    importance_repeats: int = 10
    simulation: SimConfig | None = None
    n_external: int | None = None
    replications: int = 25
    benchmark_forest: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise DataValidationError("config must be a mapping")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise DataValidationError(f"unknown config keys: {sorted(unknown)}")
        base = Path(base)
        cfg = cls(base=base)
        cfg.seed = _check_int(d, "seed", 0, default=0)
        cfg.threads = _check_int(d, "threads", 1, default=1)
        cfg.mode = d.get("mode", "dynforest")
        if cfg.mode not in ("dynforest", "rc"):
            raise DataValidationError(f"mode must be dynforest or rc, got {cfg.mode!r}")
        cfg.data = DataPaths.parse(d.get("data"), base, "data")
        cfg.external = DataPaths.parse(d.get("external"), base, "external")
        cfg.model = base / d["model"] if d.get("model") else None
        cfg.output = base / d["output"] if d.get("output") else None

        forest = dict(d.get("forest") or {})
        unknown = set(forest) - _FOREST_KEYS
        if unknown:
            raise DataValidationError(f"unknown forest keys: {sorted(unknown)}")
        _check_int(forest, "n_estimators", 1)
        _check_int(forest, "mtry", 1)
        _check_int(forest, "minsplit", 1)
        _check_int(forest, "nodesize", 1)
        _check_int(forest, "cause", 1)
        _check_int(forest, "q_min", 1)
        cfg.forest = forest

        tune = d.get("tune") or {}
        if "grid" in tune:
            grid = tune["grid"]
            if not isinstance(grid, list) or not grid:
                raise DataValidationError("tune.grid must be a non-empty list")
            for m in grid:
                _check_int({"mtry": m}, "mtry", 1)
            cfg.tune_grid = tuple(int(m) for m in grid)

        ev = d.get("evaluation") or {}
        t1, t2 = ev.get("tau1"), ev.get("tau2")
        if t1 is not None and t2 is not None and not float(t1) < float(t2):
            raise DataValidationError("evaluation.tau1 must be < evaluation.tau2")
        cfg.tau = (None if t1 is None else float(t1), None if t2 is None else float(t2))
        cfg.landmarks = _check_float_list(ev, "landmarks", [2.0, 4.0])
        cfg.horizons = _check_float_list(ev, "horizons", [1.0, 2.0])
        if any(w <= 0 for w in cfg.horizons):
            raise DataValidationError("horizons must be > 0")

        cv = d.get("cv") or {}
        cfg.cv_folds = _check_int(cv, "folds", 2, default=10)
        cfg.cv_repeats = _check_int(cv, "repeats", 1, default=1)
        cfg.importance_repeats = _check_int(d.get("importance") or {}, "repeats", 1, default=10)

        sim = d.get("simulation")
        if sim is not None:
            sim = dict(sim)
            cfg.n_external = _check_int(sim, "n_external", 1)
            sim.pop("n_external", None)
            cfg.replications = _check_int(sim, "replications", 1, default=25)
            sim.pop("replications", None)
            try:
                cfg.simulation = SimConfig.from_dict(sim)
            except TypeError as exc:
                raise DataValidationError(f"simulation: {exc}") from None
        bench = dict(d.get("benchmark") or {})
        unknown = set(bench) - {"dynforest", "rc"}
        if unknown:
            raise DataValidationError(f"unknown benchmark keys: {sorted(unknown)}")
        for k, v in bench.items():
            v = dict(v or {})
            if set(v) - _FOREST_KEYS:
                raise DataValidationError(f"unknown benchmark.{k} keys: {sorted(set(v) - _FOREST_KEYS)}")
            bench[k] = v
        cfg.benchmark_forest = bench
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise DataValidationError(f"config file not found: {path}")
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise DataValidationError(f"config is not valid YAML: {exc}") from None
        return cls.from_dict(d, base=path.parent)

    def forest_params(self, mode=None, **extra) -> dict:
        params = dict(self.forest)
        params.update(extra)
        params["mode"] = self.mode if mode is None else mode
        params.setdefault("random_state", self.seed)
        params["n_jobs"] = self.threads
        return params

    def require(self, *names) -> None:
        """Validate that the entries a command needs are present and exist."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise DataValidationError(f"config entry {name!r} is required for this command")
            if isinstance(value, DataPaths):
                value.check_exist(name)
