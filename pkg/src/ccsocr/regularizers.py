"""Priors used by the solver.

* paired orthogonal dictionaries on groups of matched albedo blocks,
* temporal Wiener filtering of measured histograms in a DCT basis,
* a learned orthogonal tight frame on 3-D patches of the virtual signal.

All three are square orthogonal transforms, so each coefficient update is an
elementwise closed form and each dictionary update is an orthogonal
Procrustes problem solved by one SVD.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from . import _kernels
from .core import hard_threshold
from .errors import ParameterError

# -- patch geometry ----------------------------------------------------------


def patch_positions(n, size, stride):
    """Origins of patches of ``size`` along an axis of length ``n``.

    Regular steps of ``stride``, with a final patch flush against the end so
    every sample is covered.
    """
    if size < 1 or stride < 1:
        raise ParameterError("patch size and stride must be >= 1")
    if size > n:
        raise ParameterError(f"patch size {size} exceeds axis length {n}")
    if stride > size:
        raise ParameterError(f"stride {stride} > patch size {size} leaves coverage gaps")
    pos = list(range(0, n - size + 1, stride))
    if pos[-1] != n - size:
        pos.append(n - size)
    return np.array(pos, dtype=np.int64)


class PatchGeometry:
    """Extraction and overlap-average aggregation of N-d patches.

    Patches are returned as rows of a ``(n_patches, prod(size))`` matrix in
    lexicographic order of their origins.
    """

    def __init__(self, shape, size, stride):
        self.shape = tuple(int(s) for s in shape)
        self.size = tuple(int(s) for s in size)
        self.stride = tuple(int(s) for s in stride)
        if not len(self.shape) == len(self.size) == len(self.stride):
            raise ParameterError("shape, size and stride need the same length")
        self.positions = [patch_positions(n, p, s) for n, p, s in zip(self.shape, self.size, self.stride)]
        self.lattice = tuple(len(p) for p in self.positions)
        self.counts = self.aggregate(np.ones((self.n_patches, self.patch_len)), average=False)

    @property
    def n_patches(self):
        return int(np.prod(self.lattice))

    @property
    def patch_len(self):
        return int(np.prod(self.size))

    def extract(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise ParameterError(f"array shape {x.shape} differs from geometry {self.shape}")
        win = sliding_window_view(x, self.size)[np.ix_(*self.positions)]
        return win.reshape(self.n_patches, self.patch_len)

    def aggregate(self, patches, average=True):
        """Sum (or average) patch rows back into an array of ``shape``."""
        patches = np.asarray(patches, dtype=float).reshape(self.lattice + self.size)
        out = np.zeros(self.shape)
        nd = len(self.shape)
        for offset in np.ndindex(*self.size):
            idx = np.ix_(*[self.positions[a] + offset[a] for a in range(nd)])
            out[idx] += patches[(Ellipsis,) + offset]
        if average:
            out /= self.counts
        return out

    def origins(self):
        grids = np.meshgrid(*self.positions, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


def aggregate_patches(patches, geometry):
    """Overlap-average patch rows back into a signal or volume."""
    return geometry.aggregate(patches)


def dct_matrix(n):
    """Orthonormal DCT-II basis; column ``j`` is the ``j``-th filter."""
    return dct(np.eye(n), type=2, norm="ortho", axis=0).T


def separable_dct(size):
    """Kronecker product of 1-D DCT bases, matching row-major patch vectors."""
    mat = np.ones((1, 1))
    for n in size:
        mat = np.kron(mat, dct_matrix(n))
    return mat


def procrustes(m):
    """Orthogonal ``W`` maximizing ``trace(W^T m)``: ``U V^T`` from the SVD of ``m``."""
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def orthogonality_error(w):
    return float(np.max(np.abs(w.T @ w - np.eye(w.shape[1]))))


# -- block matching and paired dictionaries ------------------------------------


@dataclass
class BlockGroup:
    """Reference block index, member block indices (reference first), stacked blocks."""

    reference: int
    members: np.ndarray
    matrix: np.ndarray


@dataclass
class BlockMatching:
    """Result of block matching over a whole volume.

    ``members[i]`` lists the blocks grouped with reference block ``i``;
    ``blocks`` holds every block as a row.
    """

    geometry: PatchGeometry
    blocks: np.ndarray
    members: np.ndarray

    @property
    def n_neighbors(self):
        return self.members.shape[1]

    def stacks(self, blocks=None):
        """Group tensor ``(n_groups, block_len, r)``; columns are member blocks."""
        blocks = self.blocks if blocks is None else blocks
        return np.ascontiguousarray(np.transpose(blocks[self.members], (0, 2, 1)))

    def groups(self) -> List[BlockGroup]:
        g = self.stacks()
        return [BlockGroup(i, self.members[i], g[i]) for i in range(self.members.shape[0])]

    def aggregate(self, stacks):
        """Put every member block of every group back and overlap-average."""
        block_len = self.geometry.patch_len
        sums = np.zeros((self.blocks.shape[0], block_len))
        np.add.at(sums, self.members.ravel(), np.transpose(stacks, (0, 2, 1)).reshape(-1, block_len))
        mult = np.bincount(self.members.ravel(), minlength=self.blocks.shape[0]).astype(float)
        # each occurrence of a block spreads over its voxels; weight by occurrence count
        total = self.geometry.aggregate(sums, average=False)
        weight = self.geometry.aggregate(np.repeat(mult[:, None], block_len, axis=1), average=False)
        out = np.zeros(self.geometry.shape)
        nz = weight > 0
        out[nz] = total[nz] / weight[nz]
        return out


def block_match(L, size=4, window=5, n_neighbors=8, stride=2):
    """Group each block of ``L`` with its closest blocks (plain SSD).

    Candidates are the blocks whose lattice position lies within ``window``
    steps of the reference along every axis.  The reference always comes
    first; ties are broken by lexicographic block origin.  If some window
    holds fewer than ``n_neighbors`` blocks, every group is truncated to the
    smallest available count.
    """
    if window < 0 or n_neighbors < 1:
        raise ParameterError("window must be >= 0 and n_neighbors >= 1")
    size = (size,) * 3 if np.isscalar(size) else tuple(size)
    stride = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
    geom = PatchGeometry(np.shape(L), size, stride)
    blocks = np.ascontiguousarray(geom.extract(L))
    members = _kernels.block_match(blocks, np.array(geom.lattice, dtype=np.int64), int(window),
                                   int(n_neighbors))
    valid = int(np.min(np.sum(members >= 0, axis=1)))
    return BlockMatching(geom, blocks, np.ascontiguousarray(members[:, :valid]))


@dataclass
class PairDictionaries:
    D_s: np.ndarray
    D_n: np.ndarray
    C: np.ndarray
    objective: List[float] = field(default_factory=list)

    def reconstruct(self):
        """``D_s C_i D_n^T`` for every group, shape ``(n_groups, block_len, r)``."""
        return np.einsum("pa,gab,qb->gpq", self.D_s, self.C, self.D_n, optimize=True)


def pair_objective(G, D_s, D_n, C, lambda_pu):
    """``sum_i ||G_i - D_s C_i D_n^T||^2 + lambda_pu |C_i|_0``."""
    resid = G - np.einsum("pa,gab,qb->gpq", D_s, C, D_n, optimize=True)
    return float(np.sum(resid * resid) + lambda_pu * np.count_nonzero(C))


def fit_pair_dictionaries(G, lambda_pu, D_s=None, D_n=None, sweeps=10, rtol=1e-4, check=None):
    """Alternating minimization of the paired-dictionary objective.

    ``G`` is the group tensor ``(n_groups, block_len, r)``.  Each sweep does
    (a) hard thresholding of ``D_s^T G_i D_n`` at ``sqrt(lambda_pu)``,
    (b) Procrustes for ``D_s`` and (c) Procrustes for ``D_n``.  The objective
    is logged after every half-step.  ``check``, if given, is called with the
    current ``(D_s, D_n)`` after each sweep.
    """
    G = np.asarray(G, dtype=float)
    ng, plen, r = G.shape
    if lambda_pu <= 0:
        raise ParameterError("lambda_pu must be positive")
    if not np.any(G):
        return PairDictionaries(np.eye(plen), np.eye(r), np.zeros_like(G), [0.0])
    D_s = separable_dct((plen,)) if D_s is None else np.array(D_s, dtype=float)
    D_n = dct_matrix(r) if D_n is None else np.array(D_n, dtype=float)
    y = np.sqrt(lambda_pu)
    trace = []
    prev = None
    C = None
    for _ in range(sweeps):
        C = hard_threshold(np.einsum("pa,gpq,qb->gab", D_s, G, D_n, optimize=True), y)
        trace.append(pair_objective(G, D_s, D_n, C, lambda_pu))
        if np.any(C):
            D_s = procrustes(np.einsum("gpq,qb,gab->pa", G, D_n, C, optimize=True))
            trace.append(pair_objective(G, D_s, D_n, C, lambda_pu))
            D_n = procrustes(np.einsum("gpq,pa,gab->qb", G, D_s, C, optimize=True))
            trace.append(pair_objective(G, D_s, D_n, C, lambda_pu))
        if check is not None:
            check(D_s, D_n)
        if prev is not None and prev - trace[-1] <= rtol * max(prev, 1e-300):
            break
        prev = trace[-1]
    # coefficients consistent with the final dictionaries never raise the objective
    C_final = hard_threshold(np.einsum("pa,gpq,qb->gab", D_s, G, D_n, optimize=True), y)
    trace.append(pair_objective(G, D_s, D_n, C_final, lambda_pu))
    return PairDictionaries(D_s, D_n, C_final, trace)


# -- temporal Wiener filter --------------------------------------------------------


@dataclass
class TemporalWienerModel:
    D: np.ndarray
    S: np.ndarray
    geometry: PatchGeometry
    g: Optional[np.ndarray] = None

    def signal(self):
        """``P^*(D S)``: the filtered histograms."""
        return self.geometry.aggregate(self.S @ self.D.T)


def wiener_coefficients(y_meas, y_approx, g, lambda_sb, sigma_b, eps):
    """Elementwise minimizer of ``(y1 - s)^2 + lambda_sb (y2 - s)^2 + (sigma_b s / g)^2``.

    Coefficients with ``|g| < eps`` are set to zero.
    """
    y_meas, y_approx, g = (np.asarray(a, dtype=float) for a in (y_meas, y_approx, g))
    ok = np.abs(g) >= eps
    out = np.zeros(np.broadcast(y_meas, y_approx, g).shape)
    safe = np.where(ok, g, 1.0)
    ratio = sigma_b / safe
    val = (y_meas + lambda_sb * y_approx) / (1.0 + lambda_sb + ratio * ratio)
    out[...] = np.where(ok, val, 0.0)
    return out


def wiener_objective(S, y_meas, y_approx, g, lambda_sb, sigma_b):
    """Per-coefficient Wiener objective summed; zero-``g`` entries must have ``S = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        pen = np.where(S == 0, 0.0, (sigma_b * S / g) ** 2)
    return float(np.sum((y_meas - S) ** 2 + lambda_sb * (y_approx - S) ** 2 + pen))


def wiener_update(b_meas, b, sim, lambda_sb=0.25, sigma_b=40.0, size=16, stride=8, eps_rel=1e-8):
    """Wiener coefficients of temporal patches of each histogram row.

    ``b_meas``, ``b`` and ``sim`` are ``(M, n_t)``; patches of ``size`` bins
    are cut from each row with the given ``stride``.
    """
    b_meas = np.asarray(b_meas, dtype=float)
    n_t = b_meas.shape[1]
    size = min(size, n_t)
    stride = min(stride, size)
    geom = PatchGeometry(b_meas.shape, (1, size), (1, stride))
    D = dct_matrix(size)
    y1 = geom.extract(b_meas) @ D
    y2 = geom.extract(b) @ D
    g = geom.extract(sim) @ D
    eps = eps_rel * float(np.max(np.abs(sim))) if np.any(sim) else np.inf
    S = wiener_coefficients(y1, y2, g, lambda_sb, sigma_b, eps)
    return TemporalWienerModel(D, S, geom, g)


# -- tight frame ---------------------------------------------------------------------


@dataclass
class TightFrame:
    Psi: np.ndarray
    Q: np.ndarray
    geometry: PatchGeometry
    objective: List[float] = field(default_factory=list)
    threshold: float = 0.0
    lambda_fd: float = 0.0

    def signal(self):
        """``P^*(Psi Q)``: the frame-denoised virtual signal."""
        return self.geometry.aggregate(self.Q @ self.Psi.T)


def frame_objective(patches, Psi, Q, lambda_sd, lambda_fd):
    """``(1 + lambda_sd) sum_i [||Q_i - Psi^T P_i||^2 + lambda_fd/(1 + lambda_sd) |Q_i|_0]``."""
    r = Q - patches @ Psi
    return float((1.0 + lambda_sd) * np.sum(r * r) + lambda_fd * np.count_nonzero(Q))


def blend_virtual(d, sim, lambda_sd):
    return (np.asarray(d, dtype=float) + lambda_sd * np.asarray(sim, dtype=float)) / (1.0 + lambda_sd)


def calibrate_frame_threshold(coeffs, noise_rms):
    """Largest threshold whose discarded coefficients have RMS at most ``noise_rms``.

    The RMS runs over all coefficient entries, which for an orthogonal frame
    equals the per-sample RMS of the patch residual.
    """
    a = np.sort(np.abs(np.ravel(coeffs)))
    if a.size == 0 or noise_rms <= 0:
        return 0.0
    cum = np.cumsum(a * a) / a.size
    k = int(np.searchsorted(cum, noise_rms * noise_rms, side="right"))
    if k >= a.size:
        return float(a[-1]) * (1 + 1e-12) + 1e-300
    # thresholding at a[k] discards exactly a[:k]
    return float(a[k])


def learn_tight_frame(d, sim, lambda_sd=1.0, lambda_fd=None, size=(4, 4, 16), stride=(2, 2, 8),
                      sweeps=15, rtol=1e-4, Psi=None, noise_rms=None, check=None):
    """Data-driven orthogonal tight frame on 3-D patches of the blended signal.

    The blend is ``(d + lambda_sd * sim) / (1 + lambda_sd)``.  Each sweep
    thresholds ``Psi^T P_i`` at ``sqrt(lambda_fd / (1 + lambda_sd))`` and
    re-fits ``Psi`` by Procrustes.  When ``lambda_fd`` is None it is
    calibrated from ``noise_rms`` on the initial coefficients (see
    ``calibrate_frame_threshold``).
    """
    blend = blend_virtual(d, sim, lambda_sd)
    shape = blend.shape
    size = tuple(min(s, n) for s, n in zip(size, shape))
    stride = tuple(min(s, p) for s, p in zip(stride, size))
    geom = PatchGeometry(shape, size, stride)
    patches = geom.extract(blend)
    plen = geom.patch_len
    if not np.any(patches):
        return TightFrame(np.eye(plen), np.zeros_like(patches), geom, [0.0], 0.0, float(lambda_fd or 0.0))
    Psi = separable_dct(size) if Psi is None else np.array(Psi, dtype=float)
    if lambda_fd is None:
        if noise_rms is None:
            raise ParameterError("give lambda_fd or noise_rms")
        y = calibrate_frame_threshold(patches @ Psi, noise_rms)
        lambda_fd = y * y * (1.0 + lambda_sd)
    if lambda_fd <= 0:
        y = 0.0
    else:
        y = np.sqrt(lambda_fd / (1.0 + lambda_sd))
    trace = []
    prev = None
    for _ in range(sweeps):
        coef = patches @ Psi
        Q = np.where(np.abs(coef) >= y, coef, 0.0) if y > 0 else coef
        trace.append(frame_objective(patches, Psi, Q, lambda_sd, lambda_fd))
        if np.any(Q):
            Psi = procrustes(patches.T @ Q)
            trace.append(frame_objective(patches, Psi, Q, lambda_sd, lambda_fd))
        if check is not None:
            check(Psi)
        if prev is not None and prev - trace[-1] <= rtol * max(prev, 1e-300):
            break
        prev = trace[-1]
    coef = patches @ Psi
    Q = np.where(np.abs(coef) >= y, coef, 0.0) if y > 0 else coef
    trace.append(frame_objective(patches, Psi, Q, lambda_sd, lambda_fd))
    return TightFrame(Psi, Q, geom, trace, float(y), float(lambda_fd))
