import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from topohazard.lattice import (
    LatticeField,
    ParseError,
    TieWarning,
    neighbor_table,
    neighbors,
    read_csv_grid,
    read_grid,
    read_raw_grid,
    write_csv_grid,
)


def field(vals, **kw):
    return LatticeField(np.asarray(vals, dtype=float), **kw)


def test_neighbor_counts_3x3():
    f = field(np.arange(9).reshape(3, 3))
    assert len(f.neighbors((1, 1))) == 4
    assert sorted(f.neighbors((0, 0))) == [(0, 1), (1, 0)]
    t = field(np.arange(9).reshape(3, 3), boundary="torus")
    assert sorted(t.neighbors((0, 0))) == [(0, 1), (0, 2), (1, 0), (2, 0)]
    v = field(np.arange(9).reshape(3, 3), neighborhood="vertex8")
    assert len(v.neighbors((1, 1))) == 8
    assert len(v.neighbors((0, 0))) == 3


def test_out_of_bounds_index():
    f = field(np.arange(9).reshape(3, 3))
    with pytest.raises(IndexError):
        neighbors(f, (3, 0))
    with pytest.raises(IndexError):
        f.neighbors((0, -1))


def test_small_torus_has_no_duplicates_or_self_loops():
    t = field([[0.0, 1.0]], boundary="torus", neighborhood="vertex8")
    assert t.neighbors((0, 0)) == [(0, 1)]


@pytest.mark.parametrize("boundary", ["open", "torus"])
@pytest.mark.parametrize("hood", ["edge4", "vertex8"])
@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (2, 3), (4, 4), (5, 7)])
def test_neighbor_symmetry(boundary, hood, shape):
    table = neighbor_table(*shape, boundary, hood)
    n = shape[0] * shape[1]
    pairs = {(i, j) for i in range(n) for j in table[i] if j < n}
    assert all((j, i) in pairs for i, j in pairs)
    assert all(i != j for i, j in pairs)


def test_sublevel_mask_extremes_and_median():
    rng = np.random.default_rng(0)
    f = field(rng.standard_normal((10, 10)))
    assert not f.sublevel_mask(f.values.min() - 1).any()
    assert f.sublevel_mask(f.values.max()).all()
    med = np.sort(f.values.ravel())[49]
    assert f.sublevel_mask(med).sum() == 50


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (6, 5), elements=st.floats(-10, 10, allow_nan=False)),
    st.floats(-10, 10),
    st.floats(0, 5),
)
def test_sublevel_nested(vals, t1, dt):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TieWarning)
        f = field(vals)
    a, b = f.sublevel_mask(t1), f.sublevel_mask(t1 + dt)
    assert np.all(b[a])


def test_ties_broken_in_row_major_order():
    with pytest.warns(TieWarning):
        f = field([[1.0, 1.0], [0.0, 1.0]])
    v = f.values.ravel()
    assert len(set(v)) == 4
    assert v[0] < v[1] < v[3]
    assert v[2] == 0.0


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        field([[0.0, np.nan]])


def test_values_read_only():
    f = field([[0.0, 1.0]])
    with pytest.raises(ValueError):
        f.values[0, 0] = 5


def test_csv_roundtrip(tmp_path):
    vals = np.random.default_rng(1).standard_normal((3, 4))
    p = tmp_path / "g.csv"
    write_csv_grid(vals, p)
    assert np.array_equal(read_csv_grid(p).values, vals)
    assert np.array_equal(read_grid(p).values, vals)


def test_csv_parse_error_names_line_and_field(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n3,oops\n")
    with pytest.raises(ParseError, match="line 2.*field 2"):
        read_csv_grid(p)
    p.write_text("1,2\n3\n")
    with pytest.raises(ParseError, match="line 2"):
        read_csv_grid(p)


def test_raw_grid(tmp_path):
    vals = np.arange(6, dtype="<f8").reshape(2, 3)
    p = tmp_path / "g.bin"
    vals.tofile(p)
    (tmp_path / "g.bin.json").write_text('{"nrows": 2, "ncols": 3}')
    assert np.array_equal(read_raw_grid(p).values, vals)
    (tmp_path / "g.bin.json").write_text('{"nrows": 4, "ncols": 3}')
    with pytest.raises(ParseError):
        read_raw_grid(p)
