import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from bcforest.data import (ColumnKind, CutpointGrid, Dataset, ValidationError, build_cutpoints,
                           column_cutpoints, design_matrix, load_csv, load_treatment_csv,
                           parse_kind, read_vector, standardize, write_csv)


def _dataset(n=8, seed=0, pi=False):
    rng = np.random.default_rng(seed)
    X = pd.DataFrame({
        "x1": rng.normal(size=n),
        "b": (np.arange(n) % 2).astype(float),
        "g": np.array(["a", "b", "2"] * n, dtype=object)[:n],
    })
    kinds = {"x1": ColumnKind.continuous(), "b": ColumnKind.binary(),
             "g": ColumnKind.categorical(["a", "b", "2"])}
    return Dataset(rng.normal(size=n), np.arange(n) % 2, X, kinds,
                   rng.uniform(0.1, 0.9, n) if pi else None)


@pytest.mark.parametrize("pi", [False, True])
def test_csv_round_trip(tmp_path, pi):
    ds = _dataset(pi=pi)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = load_csv(path, "y", "z", "pi_hat" if pi else None)
    assert back.equals(ds)


def test_quoted_numbers_are_labels(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text('y,z,g,x\n1.5,0,"1",0.5\n2.5,1,"2",1.5\n0.5,1,"1",2\n')
    ds = load_csv(path, "y", "z")
    assert ds.kinds["g"] == ColumnKind.categorical(["1", "2"])
    assert ds.kinds["x"] == ColumnKind.continuous()


def test_inferred_kinds(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,z,b,c,t\n1,0,0,0.3,red\n2,1,1,0.1,blue\n3,1,0,7,red\n")
    ds = load_csv(path, "y", "z")
    assert [str(ds.kinds[k]) for k in "bct"] == ["binary", "continuous", "categorical(2)"]
    assert ds.kinds["t"].levels == ("red", "blue")


@pytest.mark.parametrize("body,msg", [
    ("y,z,x\n1,2,0\n2,0,1\n", "non-binary"),
    ("y,z,x\n1,0,\n2,1,1\n", "missing"),
    ("y,z,x\n1,0,1,4\n2,1,1\n", "cells"),
    ("y,z,x\n1,0,1\n1,1,2\n", "constant"),
    ("y,q,x\n1,0,1\n2,1,2\n", "not found"),
])
def test_load_csv_validation(tmp_path, body, msg):
    path = tmp_path / "d.csv"
    path.write_text(body)
    with pytest.raises(ValidationError, match=msg):
        load_csv(path, "y", "z")


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv", "y", "z")


def test_schema_overrides_inference(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,z,g\n1,0,1\n2,1,2\n3,0,3\n")
    ds = load_csv(path, "y", "z", schema={"g": parse_kind("categorical")})
    assert ds.kinds["g"].levels == ("1", "2", "3")
    assert list(ds.X["g"]) == ["1", "2", "3"]


def test_load_treatment_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,z,x,g\n1,0,0.5,a\n2,1,1.5,b\n")
    X, kinds, z = load_treatment_csv(path, "z", exclude=("y",))
    assert list(X.columns) == ["x", "g"]
    assert z.tolist() == [0, 1]
    path.write_text("z\n0\n1\n")
    with pytest.raises(ValidationError):
        load_treatment_csv(path, "z")


def test_parse_kind():
    assert parse_kind("cont") == ColumnKind.continuous()
    assert parse_kind("Binary") == ColumnKind.binary()
    assert parse_kind("categorical:a|b").levels == ("a", "b")
    with pytest.raises(ValidationError):
        parse_kind("ordinal")


def test_dataset_validation():
    X = pd.DataFrame({"x": [0.0, 1.0, 2.0]})
    kinds = {"x": ColumnKind.continuous()}
    with pytest.raises(ValidationError):
        Dataset([1, 2, 3], [0, 1, 2], X, kinds)
    with pytest.raises(ValidationError):
        Dataset([1, 2, np.nan], [0, 1, 0], X, kinds)
    with pytest.raises(ValidationError):
        Dataset([1, 2, 3], [0, 1, 0], X, kinds, pi_hat=[0.5, 1.0, 0.2])
    with pytest.raises(ValidationError):
        Dataset([1, 2, 3], [0, 1, 0], X, {"x": ColumnKind.binary()})
    with pytest.raises(ValidationError):
        Dataset([1, 2, 3], [1, 1, 1], X, kinds).require_both_arms()


def test_dataset_is_immutable():
    ds = _dataset()
    with pytest.raises(ValueError):
        ds.y[0] = 3.0


def test_design_matrix_dummies():
    ds = _dataset()
    dm = design_matrix(ds.X, ds.kinds)
    assert dm.names == ["x1", "b", "g=a", "g=b", "g=2"]
    assert dm.indicator == (False, True, True, True, True)
    assert np.all(dm.values[:, 2:].sum(axis=1) == 1)
    dm2 = dm.append("pi", np.full(ds.n, 0.5))
    assert dm2.shape == (ds.n, 6) and dm2.names[-1] == "pi"


def test_cutpoints_small_and_indicator():
    assert np.array_equal(column_cutpoints(np.array([3.0, 1.0, 2.0, 1.0]), 10), [1.5, 2.5])
    assert np.array_equal(column_cutpoints(np.array([0.0, 1.0, 1.0]), 10, indicator=True), [0.5])
    assert column_cutpoints(np.ones(4), 10).size == 0
    with pytest.raises(ValidationError):
        build_cutpoints(design_matrix(*_xk()), max_cuts=0)


def _xk():
    X = pd.DataFrame({"x": np.arange(5.0)})
    return X, {"x": ColumnKind.continuous()}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=300),
       st.integers(1, 50))
def test_cutpoints_lie_strictly_between_distinct_values(xs, max_cuts):
    x = np.array(xs)
    cuts = column_cutpoints(x, max_cuts)
    u = np.unique(x)
    assert cuts.size <= min(max_cuts, u.size - 1)
    if u.size >= 2:
        assert cuts.size >= 1
    assert np.all(np.diff(cuts) > 0)
    # every cut separates two adjacent distinct values, so no bin is empty of data
    idx = np.searchsorted(u, cuts)
    assert np.all((idx >= 1) & (idx < u.size))
    assert np.allclose(cuts, (u[idx - 1] + u[idx]) / 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50),
       st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20, unique=True))
def test_bin_rule(values, cuts):
    grid = CutpointGrid((np.sort(np.array(cuts)),))
    b = grid.bin(np.array(values)[:, None])[0]
    for v, k in zip(values, b):
        for c, t in enumerate(grid.cuts[0]):
            assert (v <= t) == (k <= c)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=3, max_size=40))
def test_standardize_round_trip(ys):
    y = np.array(ys)
    if np.std(y, ddof=1) < 1e-6:
        return
    X = pd.DataFrame({"x": np.arange(y.size, dtype=float)})
    ds = Dataset(y, np.arange(y.size) % 2, X, {"x": ColumnKind.continuous()})
    y_std, inv = standardize(ds)
    assert abs(y_std.mean()) < 1e-9
    assert np.std(y_std, ddof=1) == pytest.approx(1.0)
    assert np.allclose(inv(y_std), y, atol=1e-9 * max(1.0, np.abs(y).max()))
    assert np.allclose(inv.scale_only(np.ones(2)), ds.y_sd)


def test_read_vector(tmp_path):
    path = tmp_path / "v.csv"
    path.write_text("pi_hat,other\n0.2,1\n0.4,2\n")
    assert read_vector(path).tolist() == [0.2, 0.4]
    assert read_vector(path, "other").tolist() == [1.0, 2.0]
    with pytest.raises(ValidationError):
        read_vector(path, "nope")


def test_subset_keeps_pi_hat():
    ds = _dataset(pi=True)
    sub = ds.subset(np.array([0, 3, 5]))
    assert sub.n == 3 and np.array_equal(sub.pi_hat, ds.pi_hat[[0, 3, 5]])
