"""Evaluation of reconstructed albedo volumes against ground truth.

Occupancy comparisons run on the front view: a ``(y, z)`` cell is occupied
when any voxel of its depth column survives binarization.
"""
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import GridMismatchError, ParameterError

DEFAULT_THRESHOLD = 0.25


def normalize(volume):
    """Scale to a peak of 1; all-zero input stays zero."""
    v = np.asarray(volume, dtype=float)
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    return v / peak if peak > 0 else np.zeros_like(v)


def binarize(volume, threshold=DEFAULT_THRESHOLD):
    """Occupancy after max-normalization: ``volume / max >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError(f"threshold must be in [0, 1], got {threshold}")
    v = normalize(volume)
    if not np.any(v):
        return np.zeros(v.shape, dtype=bool)
    return v >= threshold


def front_view(occupancy):
    """Project a 3-D occupancy along depth (axis 0); 2-D input is returned as is."""
    occ = np.asarray(occupancy, dtype=bool)
    return occ.any(axis=0) if occ.ndim == 3 else occ


def classification_error(recon, truth):
    """``(missing, excessive, error)`` on the front-view evaluation grid."""
    r, t = front_view(recon), front_view(truth)
    if r.shape != t.shape:
        raise GridMismatchError(f"evaluation grids differ: {r.shape} vs {t.shape}")
    missing = int(np.count_nonzero(t & ~r))
    excessive = int(np.count_nonzero(r & ~t))
    return missing, excessive, error_from_counts(missing, excessive, r.size)


def error_from_counts(missing, excessive, total):
    """Classification error as a fraction of ``total`` evaluation cells."""
    if total <= 0:
        raise ParameterError("total must be positive")
    return (missing + excessive) / total


# column categories of a depth comparison
BACKGROUND, BOTH, EXCESSIVE, MISSING = 0, 1, 2, 3


def depth_map(volume, depths, threshold=DEFAULT_THRESHOLD):
    """Depth of the occupied voxel nearest to the relay in every ``(y, z)`` column.

    ``volume`` is an albedo volume (binarized with ``threshold``) or a boolean
    occupancy; ``depths`` are the voxel-center depths along axis 0, the relay
    lying on the side of the smallest depth.  Returns ``(depth, mask)`` with
    ``mask`` True on empty columns, where ``depth`` is NaN.
    """
    vol = np.asarray(volume)
    occ = vol if vol.dtype == bool else binarize(vol, threshold)
    depths = np.asarray(depths, dtype=float)
    if depths.shape != (occ.shape[0],):
        raise GridMismatchError("depths must list one value per depth slice")
    order = np.argsort(depths, kind="stable")
    occ_sorted = occ[order]
    first = np.argmax(occ_sorted, axis=0)
    mask = ~occ.any(axis=0)
    depth = depths[order][first]
    depth = np.where(mask, np.nan, depth)
    return depth, mask


def depth_comparison(recon_depth, recon_mask, truth_depth, truth_mask):
    """Absolute depth error image and column categories.

    Errors are defined where both columns are occupied; categories mark
    background, both, excessive (recon only) and missing (truth only).
    """
    both = ~recon_mask & ~truth_mask
    cat = np.full(recon_mask.shape, BACKGROUND, dtype=np.int8)
    cat[both] = BOTH
    cat[~recon_mask & truth_mask] = EXCESSIVE
    cat[recon_mask & ~truth_mask] = MISSING
    err = np.where(both, np.abs(np.nan_to_num(recon_depth) - np.nan_to_num(truth_depth)), 0.0)
    return err, cat


def psnr(recon, truth):
    """Peak signal-to-noise ratio in dB for images on [0, 1]; ``inf`` when identical."""
    a, b = np.asarray(recon, dtype=float), np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise GridMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def ssim(a, b, sigma=1.5, data_range=1.0, k1=0.01, k2=0.03):
    """Single-scale structural similarity with a Gaussian window."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise GridMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def blur(x):
        return gaussian_filter(x, sigma, mode="reflect", truncate=3.5)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def front_projection(albedo):
    """Max-normalized maximum-intensity projection along depth."""
    v = np.asarray(albedo, dtype=float)
    return normalize(v.max(axis=0) if v.ndim == 3 else v)


@dataclass
class EvaluationReport:
    missing: int
    excessive: int
    total: int
    classification_error: float
    max_depth_error: float
    mean_depth_error: float
    psnr: float
    ssim: float

    def to_dict(self):
        out = asdict(self)
        for key in ("max_depth_error", "mean_depth_error", "psnr"):
            val = out[key]
            if not np.isfinite(val):
                out[key] = None if np.isnan(val) else ("inf" if val > 0 else "-inf")
        return out


def evaluate(recon_albedo, truth_albedo, depths, threshold=DEFAULT_THRESHOLD):
    """Full report for two albedo volumes on the same grid."""
    r = np.asarray(recon_albedo, dtype=float)
    t = np.asarray(truth_albedo, dtype=float)
    if r.shape != t.shape:
        raise GridMismatchError(f"volume shapes differ: {r.shape} vs {t.shape}")
    r_occ, t_occ = binarize(r, threshold), binarize(t, threshold)
    missing, excessive, err = classification_error(r_occ, t_occ)
    rd, rm = depth_map(r_occ, depths)
    td, tm = depth_map(t_occ, depths)
    derr, cat = depth_comparison(rd, rm, td, tm)
    both = cat == BOTH
    max_err = float(derr[both].max()) if both.any() else float("nan")
    mean_err = float(derr[both].mean()) if both.any() else float("nan")
    rp, tp = front_projection(r), front_projection(t)
    return EvaluationReport(missing, excessive, int(r_occ.shape[1] * r_occ.shape[2]), float(err),
                            max_err, mean_err, psnr(rp, tp), ssim(rp, tp))
