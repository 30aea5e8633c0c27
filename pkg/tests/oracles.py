"""Independent reference implementations used by the tests.

Everything here is written from the defining formulas with plain Python
loops or brute force, sharing no code with the package beyond the value
types.
"""
import itertools
import math

import numpy as np


def transport_matrix(centers, illum, detect, n_t, bin_width, t0, c, weight):
    """Dense transport matrix, one pair and one voxel at a time.

    Row ``k * n_t + j``, column ``3 * v + comp``.
    """
    m = len(illum)
    n = len(centers)
    A = np.zeros((m * n_t, 3 * n))
    for k in range(m):
        for v in range(n):
            x = centers[v]
            a = [illum[k][i] - x[i] for i in range(3)]
            b = [detect[k][i] - x[i] for i in range(3)]
            ri = math.sqrt(sum(t * t for t in a))
            rd = math.sqrt(sum(t * t for t in b))
            f = ((ri + rd) / c - t0) / bin_width
            j = math.floor(f)
            frac = f - j
            amp = weight / (ri ** 2 * rd ** 3)
            for jj, w in ((j, 1.0 - frac), (j + 1, frac)):
                if 0 <= jj < n_t:
                    for comp in range(3):
                        A[k * n_t + jj, 3 * v + comp] += w * amp * b[comp]
    return A


def scalar_matrix(centers, illum, detect, n_t, bin_width, t0, c, weight):
    """Dense scalar (back-projection) transport matrix."""
    m, n = len(illum), len(centers)
    A = np.zeros((m * n_t, n))
    for k in range(m):
        for v in range(n):
            ri = float(np.linalg.norm(np.subtract(illum[k], centers[v])))
            rd = float(np.linalg.norm(np.subtract(detect[k], centers[v])))
            f = ((ri + rd) / c - t0) / bin_width
            j = math.floor(f)
            frac = f - j
            for jj, w in ((j, 1.0 - frac), (j + 1, frac)):
                if 0 <= jj < n_t:
                    A[k * n_t + jj, v] += w * weight / (ri ** 2 * rd ** 2)
    return A


def exhaustive_block_match(L, size, window, n_neighbors, stride):
    """Full pairwise block distance table with a lexsort ranking (reference first)."""
    L = np.asarray(L, dtype=float)
    positions = []
    for n in L.shape:
        pos = list(range(0, n - size + 1, stride))
        if pos[-1] != n - size:
            pos.append(n - size)
        positions.append(pos)
    origins = list(itertools.product(*positions))
    lattice = list(itertools.product(*[range(len(p)) for p in positions]))
    blocks = np.array([L[o[0]:o[0] + size, o[1]:o[1] + size, o[2]:o[2] + size].ravel() for o in origins])
    out = []
    for i in range(len(origins)):
        cand, keys = [], []
        for j in range(len(origins)):
            if all(abs(lattice[j][a] - lattice[i][a]) <= window for a in range(3)):
                cand.append(j)
                keys.append(-1.0 if j == i else float(np.sum((blocks[j] - blocks[i]) ** 2)))
        order = sorted(range(len(cand)), key=lambda t: (keys[t], cand[t]))
        out.append([cand[t] for t in order][:n_neighbors])
    valid = min(len(o) for o in out)
    return np.array([o[:valid] for o in out])


def wiener_scalar(y1, y2, g, lambda_sb, sigma_b):
    """Minimizer of ``(y1 - s)^2 + lambda_sb (y2 - s)^2 + (sigma_b s / g)^2`` from its derivative."""
    # d/ds: -2(y1 - s) - 2 lambda_sb (y2 - s) + 2 (sigma_b / g)^2 s = 0
    a = 1.0 + lambda_sb + (sigma_b / g) ** 2
    return (y1 + lambda_sb * y2) / a


def l0_scalar_min(terms, s):
    """Brute-force minimizer of ``sum_i w_i (x - t_i)^2 + s [x != 0]`` over x.

    ``terms`` is a list of ``(w_i, t_i)``.  Compares x = 0 with the
    weighted mean.
    """
    wsum = sum(w for w, _ in terms)
    mean = sum(w * t for w, t in terms) / wsum

    def f(x):
        return sum(w * (x - t) ** 2 for w, t in terms) + (s if x != 0 else 0.0)

    return mean if f(mean) < f(0.0) else 0.0


def group_shrink_line_search(w, s_u, mu, samples=4001):
    """Minimize ``s_u |v| + mu |v - w|^2`` along the ray ``v = t w / |w|`` by grid search."""
    norm = float(np.linalg.norm(w))
    if norm == 0:
        return np.zeros(3)
    ts = np.linspace(0.0, norm, samples)
    vals = s_u * ts + mu * (ts - norm) ** 2
    t = ts[int(np.argmin(vals))]
    return t * np.asarray(w) / norm


def dct_ii(n):
    """Orthonormal DCT-II basis from the cosine formula; column j is the j-th filter."""
    k = np.arange(n)
    mat = np.cos(np.pi * (2 * k[:, None] + 1) * k[None, :] / (2 * n))
    mat[:, 0] *= math.sqrt(1.0 / n)
    mat[:, 1:] *= math.sqrt(2.0 / n)
    return mat


def grid_search_group_lasso(A, b, s, lo, hi, n=121, rounds=4):
    """Brute-force ``argmin ||A x - b||^2 + s |x|_1`` over a box in 3-D, refined by zooming.

    Each round evaluates a full ``n^3`` grid and shrinks the box around the
    best point to four grid steps per side.
    """
    lo, hi = np.array(lo, dtype=float), np.array(hi, dtype=float)
    best = None
    for _ in range(rounds):
        axes = [np.linspace(lo[i], hi[i], n) for i in range(3)]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        r = X @ A.T - b
        f = np.sum(r * r, axis=1) + s * np.sum(np.abs(X), axis=1)
        best = X[int(np.argmin(f))]
        step = (hi - lo) / (n - 1)
        lo, hi = best - 4 * step, best + 4 * step
    return best
