import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynforest.data import (Covariate, LongitudinalDataset, MarkerTable, Schema, load_dataset,
                            load_schema, save_dataset, save_schema, write_dataset_files)
from dynforest.exceptions import DataValidationError
from dynforest.simulate import SimConfig, simulate_dataset

from conftest import make_dataset


def _write(tmp_path, fixed, long, schema=None):
    schema = schema or Schema((Covariate("x"),), ("y",), 1)
    (tmp_path / "f.csv").write_text(fixed)
    (tmp_path / "l.csv").write_text(long)
    return tmp_path / "f.csv", tmp_path / "l.csv", schema


def test_two_subject_toy(tmp_path):
    f, l, s = _write(tmp_path, "id,event_time,cause,x\na,3.0,1,0.5\nb,4.0,0,-1\n",
                     "id,marker,time,value\na,y,0,1.0\na,y,1.5,2.0\nb,y,0,0.3\n")
    ds = load_dataset(f, l, s)
    assert ds.n_subjects == 2 and ds.schema.n_markers == 1 and ds.n_causes == 1
    ds.validate()
    assert ds.series(0, 0).times.tolist() == [0.0, 1.5]


def test_late_measurement_names_subject_and_row(tmp_path):
    f, l, s = _write(tmp_path, "id,event_time,cause,x\na,4.0,1,0.5\n",
                     "id,marker,time,value\na,y,0,1.0\na,y,5.0,2.0\n")
    with pytest.raises(DataValidationError, match=r"line 3.*'a'.*5\.0"):
        load_dataset(f, l, s)


@pytest.mark.parametrize("fixed,long,pattern", [
    ("id,event_time,cause,x\na,4,1,0\na,5,0,1\n", "id,marker,time,value\n", "duplicate"),
    ("id,event_time,cause,x\na,4,1,0\n", "id,marker,time,value\na,z,0,1\n", "unknown marker"),
    ("id,event_time,cause,x\na,4,1,0\n", "id,marker,time,value\na,y,1,1\na,y,0.5,1\n", "non-increasing"),
    ("id,event_time,cause,x\na,4,1,0\n", "id,marker,time,value\na,y,1,1\na,y,1,2\n", "tied"),
    ("id,event_time,cause,x\na,4,3,0\n", "id,marker,time,value\n", "cause 3 outside"),
    ("id,event_time,cause,x\na,4,1,0\n", "id,marker,time,value\nb,y,0,1\n", "missing from fixed"),
    ("id,event_time,cause,x\na,4,1,\n", "id,marker,time,value\n", "missing value"),
])
def test_load_errors(tmp_path, fixed, long, pattern):
    with pytest.raises(DataValidationError, match=pattern):
        load_dataset(*_write(tmp_path, fixed, long))


def test_simulated_roundtrip(tmp_path):
    cfg = SimConfig(n_subjects=30, n_markers=2, seed=3)
    ds, _ = simulate_dataset(cfg)
    paths = write_dataset_files(ds, tmp_path)
    back = load_dataset(paths["fixed"], paths["long"], paths["schema"])
    assert back.equals(ds)
    # load -> save -> load is the identity, bit for bit
    save_dataset(back, tmp_path / "f2.csv", tmp_path / "l2.csv")
    assert (tmp_path / "f2.csv").read_bytes() == paths["fixed"].read_bytes()
    assert (tmp_path / "l2.csv").read_bytes() == paths["long"].read_bytes()


def test_schema_roundtrip_and_groups(tmp_path):
    s = Schema((Covariate("a"), Covariate("b", "categorical", ("u", "v"))), ("m",), 2,
               (("fixed", ("a", "b")), ("markers", ("m",))))
    save_schema(s, tmp_path / "s.yaml")
    back = load_schema(tmp_path / "s.yaml")
    assert back == s and back.digest() == s.digest()
    assert back.group_of("m") == "markers"
    with pytest.raises(DataValidationError):
        Schema((Covariate("a"),), ("m",), 1, (("g", ("a",)),))
    with pytest.raises(DataValidationError):
        Schema((Covariate("a"),), ("m",), 0)


def test_subset_identity_and_duplicates():
    ds = make_dataset(12, n_markers=2)
    assert ds.subset(ds.ids).equals(ds)
    dup = ds.subset([ds.ids[3], ds.ids[3]])
    assert dup.n_subjects == 2
    assert dup.ids[0] != dup.ids[1] and list(dup.origin) == [ds.ids[3]] * 2
    for m in range(2):
        a, b = dup.series(0, m), dup.series(1, m)
        assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
    assert dup.event_time[0] == dup.event_time[1] == ds.event_time[3]
    with pytest.raises(DataValidationError, match="unknown subject"):
        ds.subset(["nope"])


def test_subset_event_counts_oracle():
    ds = make_dataset(50, n_causes=2, seed=4)
    rng = np.random.default_rng(0)
    for _ in range(100):
        idx = rng.integers(0, ds.n_subjects, rng.integers(1, 80))
        sub = ds.subset(ds.ids[idx])
        brute = [sum(1 for j in idx if ds.cause[j] == k) for k in range(3)]
        assert sub.event_counts().tolist() == brute


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 19), min_size=1, max_size=40))
def test_subset_preserves_records(idx):
    ds = make_dataset(20, n_markers=2, seed=9)
    sub = ds.take(idx)
    for new, old in enumerate(idx):
        assert sub.event_time[new] == ds.event_time[old]
        assert np.array_equal(sub.X[new], ds.X[old])
        for m in range(2):
            assert np.array_equal(sub.series(new, m).values, ds.series(old, m).values)
            assert np.all(sub.series(new, m).times <= sub.event_time[new])


def test_truncate_keeps_strictly_before():
    ds = make_dataset(20, seed=2)
    tr = ds.truncate(2.0)
    assert np.all(tr.markers[0].times < 2.0)
    assert len(tr.markers[0].times) == int(np.sum(ds.markers[0].times < 2.0))


def test_marker_table_take_empty():
    tab = MarkerTable.from_series([(np.array([0.0, 1.0]), np.array([1.0, 2.0])), (np.empty(0), np.empty(0))])
    assert tab.take([1, 1]).counts.tolist() == [0, 0]
    assert tab.take([0, 1, 0]).times.tolist() == [0.0, 1.0, 0.0, 1.0]


def test_constructor_validation():
    s = Schema((Covariate("x"),), ("y",), 1)
    tab = MarkerTable.from_series([(np.array([0.0, 5.0]), np.array([1.0, 2.0]))])
    with pytest.raises(DataValidationError, match="after event_time"):
        LongitudinalDataset(s, ["a"], [4.0], [1], [[0.0]], [tab])
    tab = MarkerTable.from_series([(np.array([1.0, 0.5]), np.array([1.0, 2.0]))])
    with pytest.raises(DataValidationError, match="strictly increasing"):
        LongitudinalDataset(s, ["a"], [4.0], [1], [[0.0]], [tab])
