import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ccsocr import _kernels_numpy
from ccsocr._accel import HAVE_NUMBA
from ccsocr.core import SPEED_OF_LIGHT, DirectionalAlbedo, MeasurementPair, VoxelGrid
from ccsocr.errors import GridMismatchError, ParameterError, SingularGeometryError
from ccsocr.transport import (TransportOperator, build_virtual_pairs, shared_pair_index,
                              timing_window, virtual_columns, virtual_points)

BIN = 32e-12


def small_setup(seed=0, m=5, shape=(3, 4, 2)):
    r = np.random.default_rng(seed)
    grid = VoxelGrid.from_bounds(shape, (0.3, -0.2, -0.2), (0.7, 0.2, 0.2))
    illum = np.column_stack([np.zeros(m), r.uniform(-0.3, 0.3, (m, 2))])
    detect = np.column_stack([np.zeros(m), r.uniform(-0.3, 0.3, (m, 2))])
    t0, n_t = timing_window(grid, illum, detect, BIN)
    return grid, illum, detect, t0, n_t


def oracle_dense(grid, illum, detect, n_t, t0):
    return oracles.transport_matrix(grid.centers(), illum, detect, n_t, BIN, t0, SPEED_OF_LIGHT,
                                    grid.voxel_volume)


def test_table_operator_equals_loop_oracle():
    grid, illum, detect, t0, n_t = small_setup()
    op = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    assert op.strategy == "table"
    ref = oracle_dense(grid, illum, detect, n_t, t0)
    assert np.allclose(op.dense(), ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())


def test_direct_strategy_equals_table(monkeypatch):
    import ccsocr.transport as tr

    grid, illum, detect, t0, n_t = small_setup(1)
    table = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    monkeypatch.setattr(tr, "TABLE_LIMIT", 0)
    direct = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    assert direct.strategy == "direct"
    u = np.random.default_rng(3).normal(size=grid.shape + (3,))
    s = np.random.default_rng(4).normal(size=(len(illum), n_t))
    assert np.allclose(direct.forward(u), table.forward(u), rtol=1e-12)
    assert np.allclose(direct.adjoint(s), table.adjoint(s), rtol=1e-12)


def test_single_voxel_known_bin_split():
    # one voxel at (1, 0, 0), confocal point at the origin: path length 2 m
    grid = VoxelGrid((1, 1, 1), (0.95, -0.05, -0.05), (0.1, 0.1, 0.1))
    dt = 2.0 / SPEED_OF_LIGHT / 10.25
    op = TransportOperator(grid, np.zeros((1, 3)), np.zeros((1, 3)), 12, dt)
    u = np.zeros((1, 1, 1, 3))
    u[..., 0] = 1.0
    s = op.forward(u)[0]
    amp = 1e-3 * (-1.0) / (1.0 * 1.0)
    expect = np.zeros(12)
    expect[10], expect[11] = 0.75 * amp, 0.25 * amp
    assert np.allclose(s, expect, rtol=1e-9)


@given(st.integers(0, 10_000))
def test_adjoint_identity(seed):
    grid, illum, detect, t0, n_t = small_setup(seed % 7)
    op = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    r = np.random.default_rng(seed)
    u = r.normal(size=grid.shape + (3,))
    s = r.normal(size=(len(illum), n_t))
    lhs = np.vdot(op.forward(u), s)
    rhs = np.vdot(u, op.adjoint(s))
    assert abs(lhs - rhs) <= 1e-10 * (abs(lhs) + abs(rhs) + 1e-300)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 100))
def test_linearity(a, b, seed):
    grid, illum, detect, t0, n_t = small_setup(2)
    op = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    r = np.random.default_rng(seed)
    u, v = r.normal(size=(2,) + grid.shape + (3,))
    lhs = op.forward(a * u + b * v)
    rhs = a * op.forward(u) + b * op.forward(v)
    assert np.allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max() + 1e-300)


def test_gram_diagonal_matches_dense():
    grid, illum, detect, t0, n_t = small_setup(5)
    op = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    ref = np.sum(oracle_dense(grid, illum, detect, n_t, t0) ** 2, axis=0)
    assert np.allclose(op.gram_diagonal().ravel(), ref, rtol=1e-10)


def test_virtual_lattice_equals_loop_oracle():
    grid = VoxelGrid.from_bounds((3, 4, 3), (0.3, -0.2, -0.15), (0.6, 0.2, 0.15))
    pts = virtual_points(grid, 0.0).reshape(-1, 3)
    t0, n_t = timing_window(grid, pts, pts, BIN)
    op = TransportOperator.virtual(grid, 0.0, n_t, BIN, t0)
    assert op.strategy == "lattice" and op.lattice_shape == (4, 3)
    ref = oracle_dense(grid, pts, pts, n_t, t0)
    assert np.allclose(op.dense(), ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())
    assert np.allclose(op.gram_diagonal().ravel(), np.sum(ref ** 2, axis=0), rtol=1e-9)


def test_coarse_virtual_lattice_equals_loop_oracle():
    grid = VoxelGrid.from_bounds((2, 5, 4), (0.3, -0.2, -0.2), (0.6, 0.2, 0.2))
    cy, cz = virtual_columns(5, 2), virtual_columns(4, 2)
    pts = virtual_points(grid, 0.0, cy, cz).reshape(-1, 3)
    t0, n_t = timing_window(grid, pts, pts, BIN)
    op = TransportOperator.virtual(grid, 0.0, n_t, BIN, t0, columns_y=cy, columns_z=cz)
    ref = oracle_dense(grid, pts, pts, n_t, t0)
    assert np.allclose(op.dense(), ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())
    s = np.random.default_rng(0).normal(size=(op.n_pairs, n_t))
    assert np.allclose(op.adjoint(s).ravel(), ref.T @ s.ravel(), rtol=1e-9, atol=1e-14)


def test_virtual_columns():
    assert np.array_equal(virtual_columns(6), np.arange(6))
    assert np.array_equal(virtual_columns(48, 7), np.floor((np.arange(7) + 0.5) * 48 / 7))
    with pytest.raises(ParameterError):
        virtual_columns(4, 0)


def test_build_virtual_pairs_are_confocal_column_centers():
    grid = VoxelGrid.from_bounds((2, 2, 3), (0, 0, 0), (1, 1, 1))
    pairs = build_virtual_pairs(grid, -0.5)
    assert len(pairs) == 6 and all(p.confocal for p in pairs)
    assert np.allclose(pairs[1].illum, (-0.5, 0.25, 0.5))


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_numba_and_numpy_kernels_agree():
    from ccsocr import _kernels_numba as nb

    grid, illum, detect, t0, n_t = small_setup(6, m=7, shape=(4, 3, 3))
    op = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    r = np.random.default_rng(1)
    u = r.normal(size=(grid.n_voxels, 3))
    s = r.normal(size=(len(illum), n_t))
    args = (n_t, op._inv_cdt, op._t0_bins, op.quadrature_weight)
    c = op._centers
    tab = (op._points, op._ia, op._id, op._dist, op._inv_r2, op._inv_r3)
    for name, a, b in [
        ("forward", (c, u, illum, detect), None),
        ("adjoint", (c, s, illum, detect), None),
        ("forward_table", (c, u) + tab, None),
        ("adjoint_table", (c, s) + tab, None),
    ]:
        x = getattr(nb, "transport_" + name)(*a, *args)
        y = getattr(_kernels_numpy, "transport_" + name)(*a, *args)
        assert np.allclose(x, y, rtol=1e-11, atol=1e-14 * np.abs(y).max()), name
    assert np.allclose(nb.transport_gram_diagonal(c, illum, detect, *args),
                       _kernels_numpy.transport_gram_diagonal(c, illum, detect, *args), rtol=1e-11)
    sv = r.normal(size=(len(illum), n_t))
    assert np.allclose(nb.scalar_forward(c, u[:, 0].copy(), illum, detect, *args),
                       _kernels_numpy.scalar_forward(c, u[:, 0].copy(), illum, detect, *args), rtol=1e-11)
    assert np.allclose(nb.scalar_adjoint(c, sv, illum, detect, *args),
                       _kernels_numpy.scalar_adjoint(c, sv, illum, detect, *args), rtol=1e-11)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_numba_and_numpy_lattice_agree():
    from ccsocr import _kernels_numba as nb

    grid = VoxelGrid.from_bounds((3, 5, 4), (0.3, -0.2, -0.2), (0.6, 0.2, 0.2))
    pts = virtual_points(grid, 0.0).reshape(-1, 3)
    t0, n_t = timing_window(grid, pts, pts, BIN)
    op = TransportOperator.virtual(grid, 0.0, n_t, BIN, t0, columns_y=[0, 2, 4], columns_z=[1, 3])
    r = np.random.default_rng(2)
    u = r.normal(size=grid.shape + (3,))
    s = r.normal(size=(op.n_pairs, n_t))
    geo = (op._cols_y, op._cols_z, op._dir_x, op._ys, op._zs, op._fbin, op._kern, n_t)
    assert np.allclose(nb.lattice_forward(u, *geo), _kernels_numpy.lattice_forward(u, *geo), rtol=1e-11)
    shp = np.array(grid.shape, dtype=np.int64)
    assert np.allclose(nb.lattice_adjoint(s, shp, *geo), _kernels_numpy.lattice_adjoint(s, shp, *geo),
                       rtol=1e-11)


def test_singular_geometry_rejected():
    grid = VoxelGrid((1, 1, 1), (-0.5, -0.5, -0.5), (1, 1, 1))
    with pytest.raises(SingularGeometryError):
        TransportOperator(grid, np.zeros((1, 3)), np.ones((1, 3)), 4, BIN)


def test_shape_checks():
    grid, illum, detect, t0, n_t = small_setup()
    op = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    with pytest.raises(GridMismatchError):
        op.forward(np.zeros(grid.shape))
    with pytest.raises(GridMismatchError):
        op.adjoint(np.zeros((1, n_t)))
    with pytest.raises(ParameterError):
        TransportOperator(grid, illum, detect, 0, BIN)
    with pytest.raises(GridMismatchError):
        op.apply(DirectionalAlbedo.zeros(VoxelGrid((1, 1, 1))))


def test_apply_roundtrip_types():
    grid, illum, detect, t0, n_t = small_setup()
    op = TransportOperator(grid, illum, detect, n_t, BIN, t0)
    u = DirectionalAlbedo(grid, np.ones(grid.shape + (3,)))
    sig = op.apply(u)
    assert op.matches(sig)
    back = op.apply_adjoint(sig)
    assert np.allclose(back.u, op.gram(u.u))


def test_shared_pair_index_nearest_and_ties():
    d = [MeasurementPair((0, y, z), (0, y, z)) for y in (0.0, 1.0) for z in (0.0, 1.0)]
    b = [MeasurementPair((0, 1.0, 0.0), (0, 1.0, 0.0)),
         MeasurementPair((0, 0.0, 0.0), (0, 1.0, 0.0)),
         MeasurementPair((0, 0.5, 0.5), (0, 0.5, 0.5))]
    assert shared_pair_index(b, d, tol=1e-6, d_shape=(2, 2)) == [(0, (1, 0))]
    # with a wide tolerance the equidistant third pair goes to the smallest index
    out = dict(shared_pair_index(b, d, tol=0.8, d_shape=(2, 2)))
    assert out[2] == (0, 0)
    with pytest.raises(ParameterError):
        shared_pair_index(b, d, tol=-1)


def test_timing_window_covers_all_paths():
    grid, illum, detect, t0, n_t = small_setup()
    c = grid.centers()
    for a, b in zip(illum, detect):
        rho = np.linalg.norm(c - a, axis=1) + np.linalg.norm(c - b, axis=1)
        f = (rho / SPEED_OF_LIGHT - t0) / BIN
        assert f.min() >= 1 and f.max() <= n_t - 2


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("", "numba" if HAVE_NUMBA else "numpy")])
def test_backend_flag(flag, expected):
    import os
    import subprocess
    import sys

    env = dict(os.environ, CCSOCR_PURE_NUMPY=flag)
    out = subprocess.run([sys.executable, "-c", "from ccsocr import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
