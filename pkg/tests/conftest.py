import numpy as np
import pytest

from dynforest.data import CATEGORICAL, CONTINUOUS, Covariate, LongitudinalDataset, MarkerTable, Schema

ACCEPTANCE_RESULTS = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_dataset(n=40, n_markers=1, n_causes=1, seed=0, categorical=False, groups=()):
    """Small random dataset with linear marker trajectories."""
    rng = np.random.default_rng(seed)
    covs = [Covariate("x1", CONTINUOUS)]
    X = [rng.standard_normal(n)]
    if categorical:
        covs.append(Covariate("g", CATEGORICAL, ("a", "b", "c")))
        X.append(rng.integers(0, 3, n).astype(float))
    X = np.column_stack(X)
    times = np.round(rng.uniform(0.5, 8.0, n), 3)
    cause = rng.integers(0, n_causes + 1, n)
    tables = []
    for m in range(n_markers):
        series = []
        for i in range(n):
            t = np.arange(0.0, times[i], 1.0)[: rng.integers(0, 7)]
            b0, b1 = rng.normal(0, 1), rng.normal(0, 0.3)
            series.append((t, 1.0 + b0 + (0.5 + b1) * t + rng.normal(0, 0.3, t.size)))
        tables.append(MarkerTable.from_series(series))
    schema = Schema(tuple(covs), tuple(f"m{j + 1}" for j in range(n_markers)), n_causes,
                    tuple(groups))
    return LongitudinalDataset(schema, [f"s{i}" for i in range(n)], times, cause, X, tables)


@pytest.fixture
def toy():
    return make_dataset()


@pytest.fixture(scope="session")
def sim_small():
    from dynforest.simulate import SimConfig, simulate_dataset

    cfg = SimConfig(n_subjects=120, n_markers=2, weibull_shape=2.0, weibull_scale=0.1,
                    hazard_form="rate", baseline_log_hazard=-2.0, seed=5)
    return simulate_dataset(cfg)[0]
