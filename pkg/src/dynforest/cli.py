"""Command-line interface.

Every command reads one YAML config (``--config``); ``--seed``,
``--threads`` and ``--mode`` override the file.  Exit status is 0 on
success, 2 for invalid input or configuration and 3 for numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .exceptions import DataValidationError, ModelFormatError, NumericalError

log = logging.getLogger("dynforest")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_manifest(cfg: RunConfig, command: str, extra=None) -> None:
    out = {"command": command, "seed": cfg.seed, "mode": cfg.mode}
    if cfg.simulation is not None:
        out["simulation"] = replace(cfg.simulation, seed=cfg.seed).to_dict()
    if extra:
        out.update(extra)
    cfg.output.mkdir(parents=True, exist_ok=True)
    (cfg.output / f"manifest_{command}.json").write_text(json.dumps(out, sort_keys=True, indent=1) + "\n")


def _tree_summary(forest) -> dict:
    depth = [max(int(k).bit_length() for k in t.nodes) for t in forest.trees_]
    leaves = [len(t.leaves) for t in forest.trees_]
    return {"mean_depth": float(np.mean(depth)), "max_depth": int(max(depth)),
            "mean_leaves": float(np.mean(leaves))}


def count_cif_violations(forest) -> int:
    bad = 0
    for tree in forest.trees_:
        for leaf in tree.leaves:
            try:
                tree.nodes[leaf].cif.check()
            except AssertionError:
                bad += 1
    return bad


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    from .simulate import make_replications, write_simulation

    cfg.require("simulation", "output")
    sim = replace(cfg.simulation, seed=cfg.seed)
    learning, external = make_replications(sim, 1, cfg.n_external)
    ds, truth = learning[0]
    files = write_simulation(ds, truth, cfg.output, "sim")
    if cfg.n_external:
        files.update({f"external_{k}": v for k, v in
                      write_simulation(*external, cfg.output, "external").items()})
    write_manifest(cfg, "simulate", {"files": {k: Path(v).name for k, v in sorted(files.items())},
                                     "n_subjects": ds.n_subjects,
                                     "n_measurements": [int(len(t.times)) for t in ds.markers]})
    return EXIT_OK


def _tune(cfg, ds):
    from .evaluation import tune_mtry

    params = cfg.forest_params()
    params.pop("mtry", None)
    n_est = params.pop("n_estimators", 100)
    return tune_mtry(ds, cfg.tune_grid, n_estimators=n_est, tau1=cfg.tau[0], tau2=cfg.tau[1], **params)


def cmd_fit(cfg: RunConfig) -> int:
    from .evaluation import oob_error
    from .forest import DynamicForest

    cfg.require("data", "model")
    ds = cfg.data.load()
    extra = {}
    tuned = None
    if cfg.tune_grid:
        best, table = _tune(cfg, ds)
        extra["mtry"] = best
        tuned = {str(k): v for k, v in table.items()}
    forest = DynamicForest(**cfg.forest_params(**extra)).fit(ds)
    cfg.model.parent.mkdir(parents=True, exist_ok=True)
    forest.save(cfg.model)
    rep = oob_error(forest, ds, *cfg.tau)
    report = {"oob_ibs": rep.ibs, "tau": list(rep.tau), "n_effective": rep.n_effective,
              "mtry": forest.mtry_, "n_estimators": len(forest.trees_), "mode": forest.mode,
              "seed": forest.seed_, "trees": _tree_summary(forest), "tuning": tuned}
    report_path = cfg.model.with_suffix(".report.json")
    report_path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_tune(cfg: RunConfig) -> int:
    cfg.require("data", "output")
    if not cfg.tune_grid:
        raise DataValidationError("tune.grid is required for the tune command")
    ds = cfg.data.load()
    best, table = _tune(cfg, ds)
    write_csv(cfg.output / "tune.csv", ["mtry", "oob_ibs", "best"],
              [(m, table[m], int(m == best)) for m in sorted(table)])
    write_manifest(cfg, "tune", {"best_mtry": best})
    return EXIT_OK


def _load_model(cfg):
    from .forest import DynamicForest

    if not cfg.model.is_file():
        raise DataValidationError(f"model file not found: {cfg.model}")
    return DynamicForest.load(cfg.model)


def predict_rows(forest, ds, landmarks, horizons):
    """Rows ``(id, cause, s, w, probability)`` and non-predictable ``(id, s, w)``."""
    rows, skipped = [], []
    K = ds.n_causes
    for s in landmarks:
        w = np.asarray(horizons, float)
        prob = forest.predict_dynamic(ds, s, w)           # (N, W, K)
        at_risk = ds.event_time > s
        for i in range(ds.n_subjects):
            if not at_risk[i]:
                continue
            for j, wj in enumerate(w):
                if np.isnan(prob[i, j]).any():
                    skipped.append((ds.ids[i], s, wj))
                    continue
                for k in range(K):
                    rows.append((ds.ids[i], k + 1, s, wj, float(prob[i, j, k])))
    return rows, skipped


def cmd_predict(cfg: RunConfig, s=None, w=None) -> int:
    cfg.require("model", "data", "output")
    forest = _load_model(cfg)
    ds = cfg.data.load()
    forest.check_schema(ds)
    landmarks = cfg.landmarks if s is None else (float(s),)
    horizons = cfg.horizons if w is None else (float(w),)
    rows, skipped = predict_rows(forest, ds, landmarks, horizons)
    write_csv(cfg.output / "predictions.csv", ["id", "cause", "s", "w", "probability"], rows)
    write_csv(cfg.output / "nonpredictable.csv", ["id", "s", "w"], skipped)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    from .evaluation import landmark_metrics

    cfg.require("model", "output")
    target = cfg.external if cfg.external is not None else cfg.data
    if target is None:
        raise DataValidationError("evaluate needs an external (or data) dataset")
    target.check_exist("external")
    forest = _load_model(cfg)
    ds = target.load()
    forest.check_schema(ds)
    rows = []
    for s in cfg.landmarks:
        for w in cfg.horizons:
            vals = landmark_metrics(forest, ds, s, w)
            rows.extend((m, s, w, "", "", vals[m]) for m in ("bs", "ibs", "auc"))
    write_csv(cfg.output / "evaluation.csv", ["metric", "s", "w", "fold", "repeat", "value"], rows)
    return EXIT_OK


def cmd_cv(cfg: RunConfig) -> int:
    from .evaluation import cross_validate

    cfg.require("data", "output")
    ds = cfg.data.load()
    params = cfg.forest_params()
    params.pop("random_state")
    recs = cross_validate(ds, cfg.cv_folds, cfg.cv_repeats, cfg.landmarks, cfg.horizons,
                          random_state=cfg.seed, **params)
    write_csv(cfg.output / "cv.csv", ["metric", "s", "w", "fold", "repeat", "value"],
              [(r["metric"], r["s"], r["w"], r["fold"], r["repeat"], r["value"]) for r in recs])
    write_manifest(cfg, "cv")
    return EXIT_OK


def cmd_importance(cfg: RunConfig) -> int:
    from .importance import importance_report

    cfg.require("model", "data", "output")
    forest = _load_model(cfg)
    ds = cfg.data.load()
    forest.check_schema(ds)
    rep = importance_report(forest, ds, cfg.importance_repeats, cfg.seed)
    cfg.output.mkdir(parents=True, exist_ok=True)
    rep.write_csv(cfg.output / "importance.csv", ds.schema)
    return EXIT_OK


def run_benchmark(sim, replications, n_external, params_by_method, landmarks, horizons, seed,
                  threads=1):
    """Paired DynForest/RC comparison on simulated replications.

    Returns ``(rows, cif_violations)`` with rows
    ``(replication, method, metric, s, w, value)``.
    """
    from .evaluation import landmark_metrics
    from .forest import DynamicForest
    from .simulate import make_replications

    learning, (ext, _) = make_replications(replace(sim, seed=seed), replications, n_external)
    rows, violations = [], 0
    for r, (ds, _) in enumerate(learning):
        for method in ("dynforest", "rc"):
            params = dict(params_by_method.get(method, {}))
            params.update(mode=method, random_state=seed * 1000 + r, n_jobs=threads)
            forest = DynamicForest(**params).fit(ds)
            violations += count_cif_violations(forest)
            for s in landmarks:
                for w in horizons:
                    vals = landmark_metrics(forest, ext, s, w)
                    rows.extend((r, method, m, s, w, vals[m]) for m in ("bs", "ibs", "auc"))
    return rows, violations


def summarise_benchmark(rows):
    cells = {}
    for r, method, metric, s, w, v in rows:
        cells.setdefault((method, metric, s, w), {})[r] = v
    out = []
    for (method, metric, s, w), vals in sorted(cells.items()):
        v = np.array([vals[k] for k in sorted(vals)], float)
        other = cells.get(("rc" if method == "dynforest" else "dynforest", metric, s, w), {})
        paired = np.array([other.get(k, np.nan) for k in sorted(vals)], float)
        better = (v < paired) if metric != "auc" else (v > paired)
        ok = ~np.isnan(v) & ~np.isnan(paired)
        frac = float(better[ok].mean()) if ok.any() else float("nan")
        out.append((method, metric, s, w, float(np.nanmean(v)), float(np.nanstd(v)), int(ok.sum()), frac))
    return out


def cmd_benchmark(cfg: RunConfig) -> int:
    cfg.require("simulation", "output")
    params = {m: dict(cfg.forest, **cfg.benchmark_forest.get(m, {})) for m in ("dynforest", "rc")}
    rows, violations = run_benchmark(cfg.simulation, cfg.replications, cfg.n_external, params,
                                     cfg.landmarks, cfg.horizons, cfg.seed, cfg.threads)
    write_csv(cfg.output / "benchmark.csv", ["replication", "method", "metric", "s", "w", "value"], rows)
    write_csv(cfg.output / "benchmark_summary.csv",
              ["method", "metric", "s", "w", "mean", "sd", "n", "fraction_better_than_other"],
              summarise_benchmark(rows))
    write_manifest(cfg, "benchmark", {"replications": cfg.replications, "cif_violations": violations})
    if violations:
        raise NumericalError(f"{violations} leaf CIFs violate monotonicity or sum constraints")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "tune": cmd_tune, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "cv": cmd_cv, "importance": cmd_importance,
    "benchmark": cmd_benchmark,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynforest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads (overrides config)")
        p.add_argument("--mode", choices=("dynforest", "rc"), help="forest mode (overrides config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "predict":
            p.add_argument("--s", type=float, help="landmark time")
            p.add_argument("--w", type=float, help="prediction horizon")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise DataValidationError("--seed must be >= 0")
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise DataValidationError("--threads must be >= 1")
            cfg.threads = args.threads
        if args.mode is not None:
            cfg.mode = args.mode
        fn = COMMANDS[args.command]
        if args.command == "predict":
            return fn(cfg, args.s, args.w)
        return fn(cfg)
    except (DataValidationError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
