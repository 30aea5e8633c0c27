import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ccsocr import _kernels_numpy
from ccsocr._accel import HAVE_NUMBA
from ccsocr.errors import ParameterError
from ccsocr.regularizers import (PatchGeometry, block_match, calibrate_frame_threshold, dct_matrix,
                                 fit_pair_dictionaries, frame_objective, learn_tight_frame,
                                 orthogonality_error, pair_objective, patch_positions, procrustes,
                                 separable_dct, wiener_coefficients, wiener_objective, wiener_update)

small = st.floats(-100, 100, allow_nan=False)


def test_patch_positions():
    assert list(patch_positions(10, 4, 2)) == [0, 2, 4, 6]
    assert list(patch_positions(9, 4, 2)) == [0, 2, 4, 5]
    assert list(patch_positions(4, 4, 1)) == [0]
    for bad in ((3, 4, 1), (8, 2, 3), (8, 0, 1)):
        with pytest.raises(ParameterError):
            patch_positions(*bad)


@given(arrays(float, (5, 7, 6), elements=small))
def test_extract_then_average_is_identity(x):
    geom = PatchGeometry(x.shape, (3, 4, 2), (2, 3, 1))
    assert np.allclose(geom.aggregate(geom.extract(x)), x)


def test_extract_row_order():
    x = np.arange(24.0).reshape(4, 6)
    geom = PatchGeometry(x.shape, (2, 3), (2, 3))
    p = geom.extract(x)
    assert np.array_equal(p[1], x[0:2, 3:6].ravel())
    assert np.array_equal(geom.origins()[2], [2, 0])


@pytest.mark.parametrize("n", [1, 2, 5, 16])
def test_dct_matrix_matches_cosine_formula(n):
    assert np.allclose(dct_matrix(n), oracles.dct_ii(n), atol=1e-13)
    assert orthogonality_error(separable_dct((2, 3, 4))) < 1e-12


@given(arrays(float, (4, 4), elements=small))
def test_procrustes_is_orthogonal_and_optimal(m):
    w = procrustes(m)
    assert orthogonality_error(w) < 1e-9
    # no random orthogonal matrix beats it on trace(W^T m)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
    assert np.trace(w.T @ m) >= np.trace(q.T @ m) - 1e-9


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("stride", [1, 2])
def test_block_match_equals_exhaustive_oracle(seed, stride):
    L = np.random.default_rng(seed).random((7, 6, 6))
    L[2:4] = L[0:2]  # create exact duplicates to exercise ties
    got = block_match(L, size=2, window=2, n_neighbors=6, stride=stride)
    ref = oracles.exhaustive_block_match(L, 2, 2, 6, stride)
    assert np.array_equal(got.members, ref)
    assert np.array_equal(got.members[:, 0], np.arange(len(ref)))


def test_block_match_truncates_to_smallest_window():
    L = np.random.default_rng(1).random((4, 4, 4))
    got = block_match(L, size=2, window=1, n_neighbors=50, stride=2)
    # a corner block of the 2x2x2 lattice sees all 8 blocks
    assert got.members.shape == (8, 8)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_block_match_kernels_agree():
    from ccsocr import _kernels_numba as nb

    L = np.random.default_rng(3).random((8, 8, 8))
    geom = PatchGeometry(L.shape, (2, 2, 2), (2, 2, 2))
    blocks = np.ascontiguousarray(geom.extract(L))
    lat = np.array(geom.lattice, dtype=np.int64)
    assert np.array_equal(nb.block_match(blocks, lat, 2, 10), _kernels_numpy.block_match(blocks, lat, 2, 10))


def test_group_aggregate_roundtrip():
    L = np.random.default_rng(2).random((6, 6, 6))
    bm = block_match(L, size=2, window=1, n_neighbors=4, stride=2)
    assert np.allclose(bm.aggregate(bm.stacks()), L)
    assert bm.groups()[3].reference == 3


def test_pair_dictionaries_monotone_and_orthogonal():
    L = np.random.default_rng(5).random((6, 6, 6))
    G = block_match(L, size=2, window=1, n_neighbors=4, stride=2).stacks()
    seen = []
    fit = fit_pair_dictionaries(G, 0.05, sweeps=8, rtol=0.0,
                                check=lambda a, b: seen.append(max(orthogonality_error(a), orthogonality_error(b))))
    assert max(seen) < 1e-10
    assert np.all(np.diff(fit.objective) <= 1e-9 * fit.objective[0])
    assert fit.objective[-1] == pytest.approx(pair_objective(G, fit.D_s, fit.D_n, fit.C, 0.05))


def test_pair_dictionaries_exact_on_rank_one():
    # a single active coefficient is kept, so the fit is exact
    G = np.zeros((3, 4, 2))
    G[:, 0, 0] = [2.0, 3.0, 4.0]
    fit = fit_pair_dictionaries(G, 0.1, D_s=np.eye(4), D_n=np.eye(2))
    assert np.allclose(fit.reconstruct(), G)


def test_pair_dictionaries_zero_input():
    fit = fit_pair_dictionaries(np.zeros((2, 3, 2)), 1.0)
    assert not np.any(fit.C) and fit.objective == [0.0]
    with pytest.raises(ParameterError):
        fit_pair_dictionaries(np.ones((2, 3, 2)), 0.0)


@given(small, small, st.floats(0.01, 100), st.floats(0, 2), st.floats(0, 50))
def test_wiener_coefficients_match_scalar_oracle(y1, y2, g, lam, sigma):
    got = wiener_coefficients(y1, y2, g, lam, sigma, 1e-12)
    assert got == pytest.approx(oracles.wiener_scalar(y1, y2, g, lam, sigma), rel=1e-12, abs=1e-12)


def test_wiener_coefficients_zero_g():
    assert wiener_coefficients(1.0, 1.0, 0.0, 0.5, 1.0, 1e-6) == 0.0


def test_wiener_update_is_stationary():
    r = np.random.default_rng(0)
    sim = r.random((3, 40))
    meas = sim + 0.1 * r.normal(size=sim.shape)
    b = sim + 0.05 * r.normal(size=sim.shape)
    w = wiener_update(meas, b, sim, 0.25, 0.5, size=16, stride=8)
    y1 = w.geometry.extract(meas) @ w.D
    y2 = w.geometry.extract(b) @ w.D
    base = wiener_objective(w.S, y1, y2, w.g, 0.25, 0.5)
    for eps in (1e-3, -1e-3):
        assert wiener_objective(w.S + eps, y1, y2, w.g, 0.25, 0.5) > base
    assert w.signal().shape == meas.shape
    assert orthogonality_error(w.D) < 1e-12


def test_calibrate_frame_threshold():
    c = np.array([3.0, -1.0, 2.0, 0.5])
    # dropping {0.5, 1} has RMS sqrt(1.25 / 4)
    assert calibrate_frame_threshold(c, np.sqrt(1.25 / 4)) == 2.0
    assert calibrate_frame_threshold(c, 0.1) == 0.5
    assert calibrate_frame_threshold(c, 0.0) == 0.0


def test_tight_frame_monotone_orthogonal():
    r = np.random.default_rng(7)
    d = r.random((6, 6, 20))
    sim = d + 0.1 * r.normal(size=d.shape)
    seen = []
    tf = learn_tight_frame(d, sim, 1.0, 0.5, size=(2, 2, 4), stride=(2, 2, 2), sweeps=6, rtol=0.0,
                           check=lambda p: seen.append(orthogonality_error(p)))
    assert max(seen) < 1e-10
    assert np.all(np.diff(tf.objective) <= 1e-9 * tf.objective[0])
    patches = tf.geometry.extract((d + sim) / 2)
    assert tf.objective[-1] == pytest.approx(frame_objective(patches, tf.Psi, tf.Q, 1.0, 0.5))
    assert tf.threshold == pytest.approx(0.5)


def test_tight_frame_zero_threshold_reproduces_blend():
    d = np.random.default_rng(8).random((4, 4, 8))
    tf = learn_tight_frame(d, d, 1.0, 0.0, size=(2, 2, 4), stride=(2, 2, 4), sweeps=2)
    assert np.allclose(tf.signal(), d)
    with pytest.raises(ParameterError):
        learn_tight_frame(d, d, 1.0, None)
