import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccsocr.errors import GridMismatchError, ParameterError
from ccsocr.metrics import (BACKGROUND, BOTH, EXCESSIVE, MISSING, binarize, classification_error,
                            depth_comparison, depth_map, error_from_counts, evaluate, front_view,
                            normalize, psnr, ssim)

unit = st.floats(0, 1, allow_nan=False)


def test_binarize_threshold_inclusive():
    v = np.array([0.0, 1.0, 2.5, 10.0])
    assert np.array_equal(binarize(v, 0.25), [False, False, True, True])
    assert not binarize(np.zeros(3)).any()
    with pytest.raises(ParameterError):
        binarize(v, 1.5)


def test_classification_counts():
    t = np.zeros((2, 3, 3), bool)
    r = np.zeros((2, 3, 3), bool)
    t[1, 0, :] = True
    r[0, 0, :2] = True
    r[0, 2, 2] = True
    assert classification_error(r, t) == (1, 1, pytest.approx(2 / 9))
    with pytest.raises(GridMismatchError):
        classification_error(r, t[:, :2])


@pytest.mark.parametrize("missing,excessive,expected", [
    (496, 2204, 0.1844), (152, 2916, 0.2095), (130, 3359, 0.2383),
    (221, 3112, 0.2276), (646, 2027, 0.1826), (518, 482, 0.0683)])
def test_error_from_reported_counts(missing, excessive, expected):
    assert error_from_counts(missing, excessive, 121 * 121) == pytest.approx(expected, abs=5e-5)


def test_depth_map_nearest_occupied():
    occ = np.zeros((3, 2, 2), bool)
    occ[2, 0, 0] = occ[1, 0, 0] = True
    occ[0, 1, 1] = True
    depth, mask = depth_map(occ, [0.4, 0.5, 0.6])
    assert depth[0, 0] == 0.5 and depth[1, 1] == 0.4
    assert mask[0, 1] and np.isnan(depth[0, 1])
    # depths listed far to near give the same physical answer
    d2, _ = depth_map(occ[::-1], [0.6, 0.5, 0.4])
    assert d2[0, 0] == 0.5


def test_depth_comparison_categories():
    rd = np.array([[0.5, 0.4], [np.nan, np.nan]])
    rm = np.isnan(rd)
    td = np.array([[0.6, np.nan], [0.4, np.nan]])
    tm = np.isnan(td)
    err, cat = depth_comparison(rd, rm, td, tm)
    assert cat.tolist() == [[BOTH, EXCESSIVE], [MISSING, BACKGROUND]]
    assert err[0, 0] == pytest.approx(0.1) and err[0, 1] == 0


def test_psnr_known():
    a = np.zeros((4, 4))
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(a, a) == float("inf")


@given(arrays(float, (8, 8), elements=unit), arrays(float, (8, 8), elements=unit))
def test_ssim_bounds_and_symmetry(a, b):
    s = ssim(a, b)
    assert -1 - 1e-9 <= s <= 1 + 1e-9
    assert s == pytest.approx(ssim(b, a))
    assert ssim(a, a) == pytest.approx(1.0)


@given(arrays(float, (3, 4, 4), elements=st.floats(0, 1e6)), st.floats(1e-3, 1e3))
def test_evaluation_scale_invariant(v, k):
    t = np.zeros_like(v)
    t[1] = 1.0
    depths = [0.1, 0.2, 0.3]
    a, b = evaluate(v, t, depths), evaluate(k * v, t, depths)
    assert (a.missing, a.excessive) == (b.missing, b.excessive)


def test_evaluate_identical_volumes():
    v = np.zeros((4, 5, 5))
    v[2, 1:4, 1:4] = 1.0
    rep = evaluate(v, v, np.linspace(0, 1, 4))
    assert rep.classification_error == 0 and rep.max_depth_error == 0
    assert rep.total == 25
    d = rep.to_dict()
    assert d["psnr"] == "inf"
    assert front_view(v).sum() == 9
    assert normalize(v * 3).max() == 1
