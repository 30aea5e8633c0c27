import numpy as np
import pytest

import oracles
from ccsocr.baselines import ScalarTransport, back_project, log_bp, log_filter
from ccsocr.core import SPEED_OF_LIGHT, VoxelGrid
from ccsocr.errors import GridMismatchError, ParameterError
from ccsocr.scenes import PatternSpec, Timing, make_pattern, make_plane_chart, simulate_measurement
from ccsocr.transport import timing_window


def setup_small():
    grid = VoxelGrid.from_bounds((3, 3, 4), (0.3, -0.2, -0.2), (0.6, 0.2, 0.2))
    pts = np.array([[0, -0.1, 0.1], [0, 0.2, -0.1], [0, 0.0, 0.0]])
    det = np.roll(pts, 1, axis=0)
    t0, n_t = timing_window(grid, pts, det, 32e-12)
    return grid, pts, det, t0, n_t


def test_scalar_transport_matches_oracle():
    grid, illum, detect, t0, n_t = setup_small()
    op = ScalarTransport(grid, illum, detect, n_t, 32e-12, t0, SPEED_OF_LIGHT)
    A = oracles.scalar_matrix(grid.centers(), illum, detect, n_t, 32e-12, t0, SPEED_OF_LIGHT,
                              grid.voxel_volume)
    r = np.random.default_rng(0)
    v = r.normal(size=grid.shape)
    s = r.normal(size=(3, n_t))
    assert np.allclose(op.forward(v).ravel(), A @ v.ravel(), rtol=1e-10)
    assert np.allclose(op.adjoint(s).ravel(), A.T @ s.ravel(), rtol=1e-10)
    with pytest.raises(GridMismatchError):
        op.forward(np.zeros(3))


def test_log_filter_of_constant_is_zero_inside():
    vol = np.ones((15, 15, 15))
    out = log_filter(vol, 1.0)
    # only the kernel cut at 3 sigma keeps the response from vanishing exactly
    assert np.allclose(out[5:10, 5:10, 5:10], out[7, 7, 7])
    assert out[7, 7, 7] < 0.02
    with pytest.raises(ParameterError):
        log_filter(vol, 0.0)


def test_log_filter_peaks_at_point():
    vol = np.zeros((11, 11, 11))
    vol[5, 5, 5] = 1.0
    out = log_filter(vol, 1.0)
    assert np.unravel_index(np.argmax(out), out.shape) == (5, 5, 5)
    assert np.all(out >= 0)


def test_log_bp_finds_plane_depth():
    grid = VoxelGrid.from_bounds((8, 8, 8), (0.4, -0.4, -0.4), (0.8, 0.4, 0.4))
    truth = make_plane_chart(grid, 0.62)
    sig = simulate_measurement(truth, make_pattern(PatternSpec(kind="grid", counts=(6, 6), extent=(0.8, 0.8))),
                               Timing(32e-12))
    bp = back_project(sig, grid)
    vol = log_bp(sig, grid, 1.0)
    k = int(np.floor((0.62 - 0.4) / 0.05))
    assert np.argmax(bp[:, 4, 4]) == k
    assert abs(int(np.argmax(vol.sum(axis=(1, 2)))) - k) <= 1
