"""Longitudinal survival data: container, CSV ingestion and validation.

Subjects carry an observed time, a cause indicator (0 = censored) and P
time-fixed covariates.  Each of the Q markers is stored as a ragged table
(CSR layout: ``offsets``, ``times``, ``values``) so that node subsets and
bootstrap resamples are plain index gathers.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .exceptions import DataValidationError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

FIXED_HEADER = ("id", "event_time", "cause")
LONG_HEADER = ("id", "marker", "time", "value")


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str = CONTINUOUS
    levels: tuple[str, ...] = ()

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class Schema:
    """Names and types of the P fixed covariates and Q markers.

    ``groups`` is an optional tuple of ``(group_name, member_names)`` pairs
    which, when given, must cover every predictor exactly once.
    """

    covariates: tuple[Covariate, ...]
    markers: tuple[str, ...]
    n_causes: int = 1
    groups: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        if int(self.n_causes) < 1:
            raise DataValidationError("n_causes must be >= 1")
        names = self.predictors
        dup = [n for n, c in Counter(names).items() if c > 1]
        if dup:
            raise DataValidationError(f"duplicate predictor names: {dup}")
        for cov in self.covariates:
            if cov.kind not in (CONTINUOUS, CATEGORICAL):
                raise DataValidationError(
                    f"covariate {cov.name!r}: unknown type {cov.kind!r}")
            if cov.is_categorical:
                if len(cov.levels) < 1 or len(set(cov.levels)) != len(cov.levels):
                    raise DataValidationError(
                        f"categorical covariate {cov.name!r} needs distinct levels")
        if self.groups:
            seen = [m for _, members in self.groups for m in members]
            unknown = sorted(set(seen) - set(names))
            if unknown:
                raise DataValidationError(f"group members not in schema: {unknown}")
            counts = Counter(seen)
            if any(c != 1 for c in counts.values()) or set(seen) != set(names):
                raise DataValidationError(
                    "group_map must assign every predictor to exactly one group")
            if any(len(members) == 0 for _, members in self.groups):
                raise DataValidationError("empty group in group_map")

    @property
    def predictors(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates) + tuple(self.markers)

    @property
    def n_covariates(self) -> int:
        return len(self.covariates)

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @property
    def group_map(self) -> dict[str, tuple[str, ...]]:
        return {g: tuple(m) for g, m in self.groups}

    def group_of(self, name: str) -> str | None:
        for g, members in self.groups:
            if name in members:
                return g
        return None

    def to_dict(self) -> dict:
        out = {
            "n_causes": int(self.n_causes),
            "covariates": [
                {"name": c.name, "type": c.kind, **({"levels": list(c.levels)} if c.is_categorical else {})}
                for c in self.covariates
            ],
            "markers": list(self.markers),
        }
        if self.groups:
            out["groups"] = {g: list(m) for g, m in self.groups}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        try:
            covs = tuple(
                Covariate(str(c["name"]), str(c.get("type", CONTINUOUS)),
                          tuple(str(v) for v in c.get("levels", ())))
                for c in d.get("covariates", []) or []
            )
            groups = d.get("groups") or {}
            return cls(
                covariates=covs,
                markers=tuple(str(m) for m in d.get("markers", []) or []),
                n_causes=int(d.get("n_causes", 1)),
                groups=tuple((str(g), tuple(str(m) for m in members))
                             for g, members in groups.items()),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataValidationError(f"malformed schema: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_schema(path) -> Schema:
    with open(path) as fh:
        return Schema.from_dict(yaml.safe_load(fh) or {})


def save_schema(schema: Schema, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(schema.to_dict(), fh, sort_keys=False)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    event_time: float
    cause: int
    fixed_covariates: np.ndarray


@dataclass(frozen=True)
class MarkerSeries:
    marker_id: int
    times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class MarkerTable:
    """Measurements of one marker for all subjects, in CSR layout."""

    offsets: np.ndarray
    times: np.ndarray
    values: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "MarkerTable":
        return cls(np.zeros(n + 1, dtype=np.int64), np.empty(0), np.empty(0))

    @classmethod
    def from_series(cls, series) -> "MarkerTable":
        counts = np.array([len(t) for t, _ in series], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        times = np.concatenate([np.asarray(t, float) for t, _ in series]) if len(series) else np.empty(0)
        values = np.concatenate([np.asarray(v, float) for _, v in series]) if len(series) else np.empty(0)
        return cls(offsets, times.astype(float), values.astype(float))

    @property
    def n_subjects(self) -> int:
        return len(self.offsets) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def subject_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_subjects), self.counts)

    def series(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.offsets[i], self.offsets[i + 1]
        return self.times[a:b], self.values[a:b]

    def take(self, idx) -> "MarkerTable":
        idx = np.asarray(idx, dtype=np.int64)
        counts = self.counts[idx]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if counts.sum() == 0:
            return MarkerTable(offsets, np.empty(0), np.empty(0))
        starts = self.offsets[idx]
        rows = np.repeat(starts - offsets[:-1], counts) + np.arange(offsets[-1])
        return MarkerTable(offsets, self.times[rows], self.values[rows])

    def keep(self, mask: np.ndarray) -> "MarkerTable":
        """Drop measurement rows where ``mask`` is False."""
        sidx = self.subject_index
        counts = np.bincount(sidx[mask], minlength=self.n_subjects)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return MarkerTable(offsets, self.times[mask], self.values[mask])

    def equals(self, other: "MarkerTable") -> bool:
        return (np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values))


class LongitudinalDataset:
    """Immutable collection of subjects with fixed covariates and marker series.

    Parameters
    ----------
    schema : Schema
    ids : sequence of str
    event_time : array of shape (N,)
        Observed time ``min(T, C)``.
    cause : array of shape (N,)
        0 for censored, otherwise the cause in ``1..K``.
    X : array of shape (N, P)
        Fixed covariates; categorical ones hold integer codes into the
        schema's level list.
    markers : sequence of Q MarkerTable
    origin : sequence of str, optional
        Provenance back-link for resampled subjects (defaults to ``ids``).
    """

    def __init__(self, schema, ids, event_time, cause, X, markers, origin=None,
                 validate=True):
        self.schema = schema
        self.ids = np.asarray([str(i) for i in ids], dtype=object)
        n = len(self.ids)
        self.event_time = np.asarray(event_time, dtype=float).reshape(n)
        self.cause = np.asarray(cause, dtype=np.int64).reshape(n)
        self.X = np.asarray(X, dtype=float).reshape(n, schema.n_covariates)
        self.markers = tuple(markers)
        self.origin = self.ids.copy() if origin is None else np.asarray(
            [str(o) for o in origin], dtype=object)
        for arr in (self.event_time, self.cause, self.X, self.origin):
            arr.flags.writeable = False
        if validate:
            self.validate()

    # -- invariants -------------------------------------------------------
    def validate(self) -> None:
        s, n = self.schema, self.n_subjects
        dup = [i for i, c in Counter(self.ids.tolist()).items() if c > 1]
        if dup:
            raise DataValidationError(f"duplicate subject ids: {dup[:5]}")
        if not np.all(np.isfinite(self.event_time)) or np.any(self.event_time < 0):
            bad = self.ids[~(np.isfinite(self.event_time) & (self.event_time >= 0))]
            raise DataValidationError(f"event_time must be finite and >= 0 (subjects {list(bad[:5])})")
        bad = (self.cause < 0) | (self.cause > s.n_causes)
        if bad.any():
            raise DataValidationError(
                f"cause outside 0..{s.n_causes} for subjects {list(self.ids[bad][:5])}")
        if not np.all(np.isfinite(self.X)):
            raise DataValidationError("fixed covariates must be finite")
        for p, cov in enumerate(s.covariates):
            if cov.is_categorical:
                codes = self.X[:, p]
                if np.any((codes != np.round(codes)) | (codes < 0) | (codes >= len(cov.levels))):
                    raise DataValidationError(f"invalid level code in covariate {cov.name!r}")
        if len(self.markers) != s.n_markers:
            raise DataValidationError(
                f"expected {s.n_markers} marker tables, got {len(self.markers)}")
        for m, tab in enumerate(self.markers):
            name = s.markers[m]
            if tab.n_subjects != n or tab.offsets[0] != 0 or np.any(np.diff(tab.offsets) < 0) \
                    or tab.offsets[-1] != len(tab.times) or len(tab.times) != len(tab.values):
                raise DataValidationError(f"marker {name!r}: malformed table")
            if not (np.all(np.isfinite(tab.times)) and np.all(np.isfinite(tab.values))):
                raise DataValidationError(f"marker {name!r}: non-finite measurements")
            sidx = tab.subject_index
            same = sidx[1:] == sidx[:-1]
            dt = np.diff(tab.times)
            if np.any(same & (dt <= 0)):
                j = int(np.flatnonzero(same & (dt <= 0))[0])
                raise DataValidationError(
                    f"marker {name!r}: times not strictly increasing for subject {self.ids[sidx[j]]!r}")
            late = tab.times > self.event_time[sidx]
            if late.any():
                j = int(np.flatnonzero(late)[0])
                raise DataValidationError(
                    f"marker {name!r}: measurement at time {tab.times[j]!r} after event_time "
                    f"{self.event_time[sidx[j]]!r} for subject {self.ids[sidx[j]]!r}")

    # -- accessors --------------------------------------------------------
    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return self.n_subjects

    @property
    def n_causes(self) -> int:
        return self.schema.n_causes

    def subject(self, i: int) -> SubjectRecord:
        return SubjectRecord(self.ids[i], float(self.event_time[i]), int(self.cause[i]),
                             self.X[i].copy())

    def series(self, i: int, m: int) -> MarkerSeries:
        t, v = self.markers[m].series(i)
        return MarkerSeries(m, t.copy(), v.copy())

    def index_of(self, ids) -> np.ndarray:
        lookup = {k: j for j, k in enumerate(self.ids.tolist())}
        try:
            return np.array([lookup[str(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataValidationError(f"unknown subject id {exc.args[0]!r}") from None

    def event_counts(self) -> np.ndarray:
        """Number of subjects per cause, index 0 holding the censored."""
        return np.bincount(self.cause, minlength=self.n_causes + 1)

    # -- derived datasets -------------------------------------------------
    def take(self, idx) -> "LongitudinalDataset":
        """Gather subjects by position; repeated positions get fresh ids."""
        idx = np.asarray(idx, dtype=np.int64)
        seen: Counter = Counter()
        new_ids = []
        for j in idx.tolist():
            k = self.ids[j]
            seen[k] += 1
            new_ids.append(k if seen[k] == 1 else f"{k}#{seen[k]}")
        return LongitudinalDataset(
            self.schema, new_ids, self.event_time[idx], self.cause[idx], self.X[idx],
            [tab.take(idx) for tab in self.markers], origin=self.origin[idx], validate=False)

    def subset(self, ids) -> "LongitudinalDataset":
        return self.take(self.index_of(ids))

    def truncate(self, s: float) -> "LongitudinalDataset":
        """Keep marker measurements strictly before the landmark ``s``."""
        tabs = [tab.keep(tab.times < s) for tab in self.markers]
        return self.replace(markers=tabs)

    def replace(self, *, schema=None, X=None, markers=None, validate=False) -> "LongitudinalDataset":
        return LongitudinalDataset(
            self.schema if schema is None else schema, self.ids, self.event_time, self.cause,
            self.X if X is None else X, self.markers if markers is None else markers,
            origin=self.origin, validate=validate)

    def equals(self, other: "LongitudinalDataset") -> bool:
        return (self.schema == other.schema
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.event_time, other.event_time)
                and np.array_equal(self.cause, other.cause)
                and np.array_equal(self.X, other.X)
                and len(self.markers) == len(other.markers)
                and all(a.equals(b) for a, b in zip(self.markers, other.markers)))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.schema.digest().encode())
        h.update("\x00".join(self.ids.tolist()).encode())
        for arr in (self.event_time, self.cause, self.X):
            h.update(np.ascontiguousarray(arr).tobytes())
        for tab in self.markers:
            for arr in (tab.offsets, tab.times, tab.values):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return (f"LongitudinalDataset(N={self.n_subjects}, P={self.schema.n_covariates}, "
                f"Q={self.schema.n_markers}, K={self.n_causes})")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_float(text: str, what: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DataValidationError(f"{what}: cannot parse {text!r} as a number") from None
    if not math.isfinite(x):
        raise DataValidationError(f"{what}: non-finite value {text!r}")
    return x


def load_dataset(fixed_table, long_table, schema) -> LongitudinalDataset:
    """Read and validate a (fixed, long) CSV pair.

    ``schema`` may be a :class:`Schema` or a path to a YAML schema file.
    """
    if not isinstance(schema, Schema):
        schema = load_schema(schema)

    with open(fixed_table, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != FIXED_HEADER:
            raise DataValidationError(
                f"{fixed_table}: header must start with {','.join(FIXED_HEADER)}")
        cov_cols = header[3:]
        expected = [c.name for c in schema.covariates]
        if sorted(cov_cols) != sorted(expected) or len(set(cov_cols)) != len(cov_cols):
            raise DataValidationError(
                f"{fixed_table}: covariate columns {cov_cols} do not match schema {expected}")
        col_pos = [cov_cols.index(name) + 3 for name in expected]
        ids, times, causes, rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataValidationError(f"{fixed_table} line {lineno}: expected {len(header)} fields")
            where = f"{fixed_table} line {lineno}"
            ids.append(row[0])
            times.append(_parse_float(row[1], where + " event_time"))
            try:
                causes.append(int(row[2]))
            except ValueError:
                raise DataValidationError(f"{where}: cause {row[2]!r} is not an integer") from None
            vals = []
            for cov, pos in zip(schema.covariates, col_pos):
                cell = row[pos]
                if cell == "":
                    raise DataValidationError(f"{where}: missing value for {cov.name!r}")
                if cov.is_categorical:
                    if cell not in cov.levels:
                        raise DataValidationError(
                            f"{where}: level {cell!r} not declared for {cov.name!r}")
                    vals.append(float(cov.levels.index(cell)))
                else:
                    vals.append(_parse_float(cell, f"{where} {cov.name}"))
            rows.append(vals)

    dup = [k for k, c in Counter(ids).items() if c > 1]
    if dup:
        raise DataValidationError(f"{fixed_table}: duplicate subject ids {dup[:5]}")
    K = schema.n_causes
    for k, c in zip(ids, causes):
        if not 0 <= c <= K:
            raise DataValidationError(f"subject {k!r}: cause {c} outside 0..{K}")
    for k, t in zip(ids, times):
        if t < 0:
            raise DataValidationError(f"subject {k!r}: negative event_time {t!r}")
    n = len(ids)
    pos = {k: j for j, k in enumerate(ids)}
    marker_pos = {name: m for m, name in enumerate(schema.markers)}
    buckets = [[[] for _ in range(n)] for _ in schema.markers]

    with open(long_table, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LONG_HEADER:
            raise DataValidationError(f"{long_table}: header must be {','.join(LONG_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{long_table} line {lineno}"
            if len(row) != 4:
                raise DataValidationError(f"{where}: expected 4 fields")
            sid, mname = row[0], row[1]
            if sid not in pos:
                raise DataValidationError(f"{where}: subject {sid!r} missing from fixed table")
            if mname not in marker_pos:
                raise DataValidationError(f"{where}: unknown marker {mname!r}")
            t = _parse_float(row[2], where + " time")
            v = _parse_float(row[3], where + " value")
            i = pos[sid]
            if t > times[i]:
                raise DataValidationError(
                    f"{where}: subject {sid!r} measured at time {t!r} after event_time {times[i]!r}")
            bucket = buckets[marker_pos[mname]][i]
            if bucket:
                last = bucket[-1][0]
                if t == last:
                    raise DataValidationError(
                        f"{where}: tied measurement time {t!r} for subject {sid!r}, marker {mname!r}")
                if t < last:
                    raise DataValidationError(
                        f"{where}: non-increasing time {t!r} for subject {sid!r}, marker {mname!r}")
            bucket.append((t, v))

    tables = []
    for per_subject in buckets:
        series = [(np.array([r[0] for r in b], float), np.array([r[1] for r in b], float))
                  for b in per_subject]
        tables.append(MarkerTable.from_series(series))
    X = np.array(rows, dtype=float).reshape(n, schema.n_covariates)
    return LongitudinalDataset(schema, ids, times, causes, X, tables)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: LongitudinalDataset, fixed_table, long_table) -> None:
    """Write ``ds`` as a CSV pair readable by :func:`load_dataset` (bit-exact)."""
    schema = ds.schema
    with open(fixed_table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(FIXED_HEADER) + [c.name for c in schema.covariates])
        for i in range(ds.n_subjects):
            cells = []
            for p, cov in enumerate(schema.covariates):
                x = ds.X[i, p]
                cells.append(cov.levels[int(x)] if cov.is_categorical else _fmt(x))
            w.writerow([ds.ids[i], _fmt(ds.event_time[i]), int(ds.cause[i])] + cells)
    with open(long_table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_HEADER)
        for i in range(ds.n_subjects):
            for m, name in enumerate(schema.markers):
                t, v = ds.markers[m].series(i)
                for tt, vv in zip(t, v):
                    w.writerow([ds.ids[i], name, _fmt(tt), _fmt(vv)])


def write_dataset_files(ds: LongitudinalDataset, directory, prefix="data") -> dict[str, Path]:
    """Write fixed/long CSVs and the schema YAML into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "fixed": directory / f"{prefix}_fixed.csv",
        "long": directory / f"{prefix}_long.csv",
        "schema": directory / f"{prefix}_schema.yaml",
    }
    save_dataset(ds, paths["fixed"], paths["long"])
    save_schema(ds.schema, paths["schema"])
    return paths
