"""Pure-numpy twins of the routines in ``_kernels_numba``.

Same signatures, same bin convention.  Loops run over measurement pairs
(or reference blocks) with the voxel dimension vectorized; results agree
with the numba path up to floating-point summation order.
"""
import numpy as np


def _bins(rho, n_t, inv_cdt, t0_bins):
    f = rho * inv_cdt - t0_bins
    fl = np.floor(f)
    keep = (fl >= -1.0) & (fl < n_t)
    j = fl.astype(np.int64)
    return j, f - fl, keep


def _splat(j, fr, val, keep, n_t):
    lo = keep & (j >= 0)
    hi = keep & (j + 1 < n_t)
    row = np.bincount(j[lo], weights=(1.0 - fr[lo]) * val[lo], minlength=n_t + 1)[:n_t]
    row = row + np.bincount(j[hi] + 1, weights=fr[hi] * val[hi], minlength=n_t + 1)[:n_t]
    return row


def _gather(j, fr, hist_row, keep, n_t):
    g = np.zeros(j.shape)
    lo = keep & (j >= 0)
    hi = keep & (j + 1 < n_t)
    g[lo] += (1.0 - fr[lo]) * hist_row[j[lo]]
    g[hi] += fr[hi] * hist_row[j[hi] + 1]
    return g


def transport_forward(centers, u, illum, detect, n_t, inv_cdt, t0_bins, weight):
    out = np.zeros((illum.shape[0], n_t))
    for k in range(illum.shape[0]):
        a = illum[k] - centers
        b = detect[k] - centers
        ri = np.sqrt(np.einsum("ij,ij->i", a, a))
        rd = np.sqrt(np.einsum("ij,ij->i", b, b))
        j, fr, keep = _bins(ri + rd, n_t, inv_cdt, t0_bins)
        val = weight * (1.0 / (ri * ri)) * (1.0 / (rd * rd * rd)) * np.einsum("ij,ij->i", b, u)
        out[k] = _splat(j, fr, val, keep, n_t)
    return out


def transport_adjoint(centers, hist, illum, detect, n_t, inv_cdt, t0_bins, weight):
    out = np.zeros((centers.shape[0], 3))
    for k in range(illum.shape[0]):
        a = illum[k] - centers
        b = detect[k] - centers
        ri = np.sqrt(np.einsum("ij,ij->i", a, a))
        rd = np.sqrt(np.einsum("ij,ij->i", b, b))
        j, fr, keep = _bins(ri + rd, n_t, inv_cdt, t0_bins)
        g = _gather(j, fr, hist[k], keep, n_t) * weight * (1.0 / (ri * ri)) * (1.0 / (rd * rd * rd))
        out += g[:, None] * b
    return out


def transport_gram_diagonal(centers, illum, detect, n_t, inv_cdt, t0_bins, weight):
    out = np.zeros((centers.shape[0], 3))
    for k in range(illum.shape[0]):
        a = illum[k] - centers
        b = detect[k] - centers
        ri = np.sqrt(np.einsum("ij,ij->i", a, a))
        rd = np.sqrt(np.einsum("ij,ij->i", b, b))
        j, fr, keep = _bins(ri + rd, n_t, inv_cdt, t0_bins)
        split = np.where(keep & (j >= 0), (1.0 - fr) ** 2, 0.0) + np.where(keep & (j + 1 < n_t), fr * fr, 0.0)
        g = weight * (1.0 / (ri * ri)) * (1.0 / (rd * rd * rd))
        out += (g * g * split)[:, None] * b * b
    return out


def transport_forward_table(centers, u, points, ia, idd, dist, inv_r2, inv_r3,
                            n_t, inv_cdt, t0_bins, weight):
    out = np.zeros((ia.shape[0], n_t))
    for k in range(ia.shape[0]):
        a, b = ia[k], idd[k]
        j, fr, keep = _bins(dist[a] + dist[b], n_t, inv_cdt, t0_bins)
        val = weight * inv_r2[a] * inv_r3[b] * np.einsum("ij,ij->i", points[b] - centers, u)
        out[k] = _splat(j, fr, val, keep, n_t)
    return out


def transport_adjoint_table(centers, hist, points, ia, idd, dist, inv_r2, inv_r3,
                            n_t, inv_cdt, t0_bins, weight):
    out = np.zeros((centers.shape[0], 3))
    for k in range(ia.shape[0]):
        a, b = ia[k], idd[k]
        j, fr, keep = _bins(dist[a] + dist[b], n_t, inv_cdt, t0_bins)
        g = _gather(j, fr, hist[k], keep, n_t) * weight * inv_r2[a] * inv_r3[b]
        out += g[:, None] * (points[b] - centers)
    return out


def _lattice_geometry(k2, k3, shape, dir_x, ys, zs, fbin, kern):
    nx, ny, nz = shape
    oy = np.abs(np.arange(ny) - k2)
    oz = np.abs(np.arange(nz) - k3)
    f = fbin[:, oy][:, :, oz]
    kk = kern[:, oy][:, :, oz]
    direction = np.empty((nx, ny, nz, 3))
    direction[..., 0] = dir_x[:, None, None]
    direction[..., 1] = (ys[k2] - ys)[None, :, None]
    direction[..., 2] = (zs[k3] - zs)[None, None, :]
    return f.ravel(), kk.ravel(), direction.reshape(-1, 3)


def lattice_forward(u4, cols_y, cols_z, dir_x, ys, zs, fbin, kern, n_t):
    shape = u4.shape[:3]
    u = u4.reshape(-1, 3)
    mz = cols_z.shape[0]
    out = np.zeros((cols_y.shape[0] * mz, n_t))
    for q in range(out.shape[0]):
        f, kk, direction = _lattice_geometry(cols_y[q // mz], cols_z[q % mz], shape,
                                             dir_x, ys, zs, fbin, kern)
        j, fr, keep = _bins(f, n_t, 1.0, 0.0)
        out[q] = _splat(j, fr, kk * np.einsum("ij,ij->i", direction, u), keep, n_t)
    return out


def lattice_adjoint(hist, shape, cols_y, cols_z, dir_x, ys, zs, fbin, kern, n_t):
    shape = tuple(int(s) for s in shape)
    mz = cols_z.shape[0]
    out = np.zeros((int(np.prod(shape)), 3))
    for q in range(hist.shape[0]):
        f, kk, direction = _lattice_geometry(cols_y[q // mz], cols_z[q % mz], shape,
                                             dir_x, ys, zs, fbin, kern)
        j, fr, keep = _bins(f, n_t, 1.0, 0.0)
        out += (_gather(j, fr, hist[q], keep, n_t) * kk)[:, None] * direction
    return out.reshape(shape + (3,))


def scalar_forward(centers, vol, illum, detect, n_t, inv_cdt, t0_bins, weight):
    out = np.zeros((illum.shape[0], n_t))
    for k in range(illum.shape[0]):
        a = illum[k] - centers
        b = detect[k] - centers
        ri2 = np.einsum("ij,ij->i", a, a)
        rd2 = np.einsum("ij,ij->i", b, b)
        j, fr, keep = _bins(np.sqrt(ri2) + np.sqrt(rd2), n_t, inv_cdt, t0_bins)
        out[k] = _splat(j, fr, weight * vol / (ri2 * rd2), keep, n_t)
    return out


def scalar_adjoint(centers, hist, illum, detect, n_t, inv_cdt, t0_bins, weight):
    out = np.zeros(centers.shape[0])
    for k in range(illum.shape[0]):
        a = illum[k] - centers
        b = detect[k] - centers
        ri2 = np.einsum("ij,ij->i", a, a)
        rd2 = np.einsum("ij,ij->i", b, b)
        j, fr, keep = _bins(np.sqrt(ri2) + np.sqrt(rd2), n_t, inv_cdt, t0_bins)
        out += weight * _gather(j, fr, hist[k], keep, n_t) / (ri2 * rd2)
    return out


def block_match(blocks, lattice_shape, window, n_keep):
    la, lb, lc = (int(s) for s in lattice_shape)
    grid = np.arange(la * lb * lc).reshape(la, lb, lc)
    members = -np.ones((blocks.shape[0], n_keep), dtype=np.int64)
    for ref in range(blocks.shape[0]):
        a, b, c = np.unravel_index(ref, (la, lb, lc))
        cand = grid[max(0, a - window):a + window + 1,
                    max(0, b - window):b + window + 1,
                    max(0, c - window):c + window + 1].ravel()
        diff = blocks[cand] - blocks[ref]
        dist = np.einsum("ij,ij->i", diff, diff)
        dist[cand == ref] = -1.0
        order = np.argsort(dist, kind="stable")[:n_keep]
        members[ref, :order.size] = cand[order]
    return members
