"""numba implementations of the hot loops.

Every routine here has a twin with the same signature in ``_kernels_numpy``;
``_kernels`` picks one of the two at import time.  Forward kernels are
parallel over measurement pairs (each writes its own histogram row) and
adjoint kernels over voxels, so results never depend on thread count.

Bin convention shared by all transport kernels: a path of length ``rho``
lands at the fractional bin ``f = rho * inv_cdt - t0_bins`` and is split
between bins ``floor(f)`` and ``floor(f) + 1`` with weights ``1 - frac`` and
``frac``.  Bins outside ``[0, n_t)`` are dropped individually.
"""
import numpy as np
from numba import njit, prange

VOXEL_BLOCK = 4096


@njit(parallel=True, cache=True)
def transport_forward(centers, u, illum, detect, n_t, inv_cdt, t0_bins, weight):
    m = illum.shape[0]
    n = centers.shape[0]
    out = np.zeros((m, n_t))
    for k in prange(m):
        ix, iy, iz = illum[k, 0], illum[k, 1], illum[k, 2]
        dx, dy, dz = detect[k, 0], detect[k, 1], detect[k, 2]
        for v in range(n):
            ax = ix - centers[v, 0]
            ay = iy - centers[v, 1]
            az = iz - centers[v, 2]
            bx = dx - centers[v, 0]
            by = dy - centers[v, 1]
            bz = dz - centers[v, 2]
            ri = np.sqrt(ax * ax + ay * ay + az * az)
            rd = np.sqrt(bx * bx + by * by + bz * bz)
            f = (ri + rd) * inv_cdt - t0_bins
            fl = np.floor(f)
            if fl < -1.0 or fl >= n_t:
                continue
            j = int(fl)
            fr = f - fl
            val = weight * (1.0 / (ri * ri)) * (1.0 / (rd * rd * rd)) * (
                bx * u[v, 0] + by * u[v, 1] + bz * u[v, 2])
            if j >= 0:
                out[k, j] += (1.0 - fr) * val
            if j + 1 < n_t:
                out[k, j + 1] += fr * val
    return out


@njit(parallel=True, cache=True)
def transport_adjoint(centers, hist, illum, detect, n_t, inv_cdt, t0_bins, weight):
    m = illum.shape[0]
    n = centers.shape[0]
    out = np.zeros((n, 3))
    for v in prange(n):
        cx, cy, cz = centers[v, 0], centers[v, 1], centers[v, 2]
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for k in range(m):
            ax = illum[k, 0] - cx
            ay = illum[k, 1] - cy
            az = illum[k, 2] - cz
            bx = detect[k, 0] - cx
            by = detect[k, 1] - cy
            bz = detect[k, 2] - cz
            ri = np.sqrt(ax * ax + ay * ay + az * az)
            rd = np.sqrt(bx * bx + by * by + bz * bz)
            f = (ri + rd) * inv_cdt - t0_bins
            fl = np.floor(f)
            if fl < -1.0 or fl >= n_t:
                continue
            j = int(fl)
            fr = f - fl
            g = 0.0
            if j >= 0:
                g += (1.0 - fr) * hist[k, j]
            if j + 1 < n_t:
                g += fr * hist[k, j + 1]
            g *= weight * (1.0 / (ri * ri)) * (1.0 / (rd * rd * rd))
            s0 += g * bx
            s1 += g * by
            s2 += g * bz
        out[v, 0] = s0
        out[v, 1] = s1
        out[v, 2] = s2
    return out


@njit(parallel=True, cache=True)
def transport_gram_diagonal(centers, illum, detect, n_t, inv_cdt, t0_bins, weight):
    # squared column norms of the operator, one entry per (voxel, component)
    m = illum.shape[0]
    n = centers.shape[0]
    out = np.zeros((n, 3))
    for v in prange(n):
        cx, cy, cz = centers[v, 0], centers[v, 1], centers[v, 2]
        for k in range(m):
            ax = illum[k, 0] - cx
            ay = illum[k, 1] - cy
            az = illum[k, 2] - cz
            bx = detect[k, 0] - cx
            by = detect[k, 1] - cy
            bz = detect[k, 2] - cz
            ri = np.sqrt(ax * ax + ay * ay + az * az)
            rd = np.sqrt(bx * bx + by * by + bz * bz)
            f = (ri + rd) * inv_cdt - t0_bins
            fl = np.floor(f)
            if fl < -1.0 or fl >= n_t:
                continue
            j = int(fl)
            fr = f - fl
            split = 0.0
            if j >= 0:
                split += (1.0 - fr) * (1.0 - fr)
            if j + 1 < n_t:
                split += fr * fr
            g = weight * (1.0 / (ri * ri)) * (1.0 / (rd * rd * rd))
            g = g * g * split
            out[v, 0] += g * bx * bx
            out[v, 1] += g * by * by
            out[v, 2] += g * bz * bz
    return out


@njit(parallel=True, cache=True)
def _detector_factor(centers, u, points, inv_r3, lo, hi):
    # q[p, v] = inv_r3[p, v] * (points[p] - c_v) . u_v, the part of a pair's
    # contribution that depends only on its detection point
    q = np.empty((points.shape[0], hi - lo))
    for p in prange(points.shape[0]):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        for v in range(lo, hi):
            q[p, v - lo] = inv_r3[p, v] * ((px - centers[v, 0]) * u[v, 0]
                                           + (py - centers[v, 1]) * u[v, 1]
                                           + (pz - centers[v, 2]) * u[v, 2])
    return q


@njit(parallel=True, cache=True)
def transport_forward_table(centers, u, points, ia, idd, dist, inv_r2, inv_r3,
                            n_t, inv_cdt, t0_bins, weight):
    # dist/inv_r2/inv_r3 are (n_points, n_voxels) tables for the unique relay
    # points; voxel blocks keep the table slices in cache while every pair
    # visits them, and each histogram entry still sums voxels in ascending order
    m = ia.shape[0]
    n = centers.shape[0]
    out = np.zeros((m, n_t))
    nblk = (n + VOXEL_BLOCK - 1) // VOXEL_BLOCK
    for blk in range(nblk):
        lo = blk * VOXEL_BLOCK
        hi = min(n, lo + VOXEL_BLOCK)
        q = _detector_factor(centers, u, points, inv_r3, lo, hi)
        for k in prange(m):
            a = ia[k]
            b = idd[k]
            for v in range(lo, hi):
                f = (dist[a, v] + dist[b, v]) * inv_cdt - t0_bins
                fl = np.floor(f)
                if fl < -1.0 or fl >= n_t:
                    continue
                j = int(fl)
                fr = f - fl
                val = weight * inv_r2[a, v] * q[b, v - lo]
                if j >= 0:
                    out[k, j] += (1.0 - fr) * val
                if j + 1 < n_t:
                    out[k, j + 1] += fr * val
    return out


@njit(parallel=True, cache=True)
def transport_adjoint_table(centers, hist, points, ia, idd, dist, inv_r2, inv_r3,
                            n_t, inv_cdt, t0_bins, weight):
    # within a voxel block the pair loop runs outside the voxel loop so the
    # table rows are read contiguously; the gathered values are summed per
    # detection point (pairs ascending) and only then turned into vectors,
    # detection points ascending
    m = ia.shape[0]
    n = centers.shape[0]
    n_p = points.shape[0]
    out = np.zeros((n, 3))
    nblk = (n + VOXEL_BLOCK - 1) // VOXEL_BLOCK
    for blk in prange(nblk):
        lo = blk * VOXEL_BLOCK
        hi = min(n, lo + VOXEL_BLOCK)
        acc = np.zeros((n_p, hi - lo))
        for k in range(m):
            a = ia[k]
            b = idd[k]
            for v in range(lo, hi):
                f = (dist[a, v] + dist[b, v]) * inv_cdt - t0_bins
                fl = np.floor(f)
                if fl < -1.0 or fl >= n_t:
                    continue
                j = int(fl)
                fr = f - fl
                g = 0.0
                if j >= 0:
                    g += (1.0 - fr) * hist[k, j]
                if j + 1 < n_t:
                    g += fr * hist[k, j + 1]
                acc[b, v - lo] += g * inv_r2[a, v]
        for p in range(n_p):
            px, py, pz = points[p, 0], points[p, 1], points[p, 2]
            for v in range(lo, hi):
                g = weight * acc[p, v - lo] * inv_r3[p, v]
                out[v, 0] += g * (px - centers[v, 0])
                out[v, 1] += g * (py - centers[v, 1])
                out[v, 2] += g * (pz - centers[v, 2])
    return out


@njit(parallel=True, cache=True)
def lattice_forward(u4, cols_y, cols_z, dir_x, ys, zs, fbin, kern, n_t):
    # confocal pairs sitting on voxel-column centers; fbin/kern indexed by
    # (depth index, |column offset y|, |column offset z|)
    nx, ny, nz = u4.shape[0], u4.shape[1], u4.shape[2]
    my = cols_y.shape[0]
    mz = cols_z.shape[0]
    out = np.zeros((my * mz, n_t))
    for q in prange(my * mz):
        k2 = cols_y[q // mz]
        k3 = cols_z[q % mz]
        for i1 in range(nx):
            ddx = dir_x[i1]
            for i2 in range(ny):
                oy = abs(i2 - k2)
                ddy = ys[k2] - ys[i2]
                for i3 in range(nz):
                    oz = abs(i3 - k3)
                    f = fbin[i1, oy, oz]
                    fl = np.floor(f)
                    if fl < -1.0 or fl >= n_t:
                        continue
                    j = int(fl)
                    fr = f - fl
                    val = kern[i1, oy, oz] * (
                        ddx * u4[i1, i2, i3, 0] + ddy * u4[i1, i2, i3, 1]
                        + (zs[k3] - zs[i3]) * u4[i1, i2, i3, 2])
                    if j >= 0:
                        out[q, j] += (1.0 - fr) * val
                    if j + 1 < n_t:
                        out[q, j + 1] += fr * val
    return out


@njit(parallel=True, cache=True)
def lattice_adjoint(hist, shape, cols_y, cols_z, dir_x, ys, zs, fbin, kern, n_t):
    # column loop outside the (y, z) voxel loops; each voxel sums the
    # columns in ascending order
    nx, ny, nz = shape[0], shape[1], shape[2]
    my = cols_y.shape[0]
    mz = cols_z.shape[0]
    out = np.zeros((nx, ny, nz, 3))
    for i1 in prange(nx):
        ddx = dir_x[i1]
        for q in range(my * mz):
            k2 = cols_y[q // mz]
            k3 = cols_z[q % mz]
            for i2 in range(ny):
                oy = abs(i2 - k2)
                ddy = ys[k2] - ys[i2]
                for i3 in range(nz):
                    oz = abs(i3 - k3)
                    f = fbin[i1, oy, oz]
                    fl = np.floor(f)
                    if fl < -1.0 or fl >= n_t:
                        continue
                    j = int(fl)
                    fr = f - fl
                    g = 0.0
                    if j >= 0:
                        g += (1.0 - fr) * hist[q, j]
                    if j + 1 < n_t:
                        g += fr * hist[q, j + 1]
                    g *= kern[i1, oy, oz]
                    out[i1, i2, i3, 0] += g * ddx
                    out[i1, i2, i3, 1] += g * ddy
                    out[i1, i2, i3, 2] += g * (zs[k3] - zs[i3])
    return out


@njit(parallel=True, cache=True)
def scalar_forward(centers, vol, illum, detect, n_t, inv_cdt, t0_bins, weight):
    m = illum.shape[0]
    n = centers.shape[0]
    out = np.zeros((m, n_t))
    for k in prange(m):
        for v in range(n):
            ax = illum[k, 0] - centers[v, 0]
            ay = illum[k, 1] - centers[v, 1]
            az = illum[k, 2] - centers[v, 2]
            bx = detect[k, 0] - centers[v, 0]
            by = detect[k, 1] - centers[v, 1]
            bz = detect[k, 2] - centers[v, 2]
            ri2 = ax * ax + ay * ay + az * az
            rd2 = bx * bx + by * by + bz * bz
            f = (np.sqrt(ri2) + np.sqrt(rd2)) * inv_cdt - t0_bins
            fl = np.floor(f)
            if fl < -1.0 or fl >= n_t:
                continue
            j = int(fl)
            fr = f - fl
            val = weight * vol[v] / (ri2 * rd2)
            if j >= 0:
                out[k, j] += (1.0 - fr) * val
            if j + 1 < n_t:
                out[k, j + 1] += fr * val
    return out


@njit(parallel=True, cache=True)
def scalar_adjoint(centers, hist, illum, detect, n_t, inv_cdt, t0_bins, weight):
    m = illum.shape[0]
    n = centers.shape[0]
    out = np.zeros(n)
    for v in prange(n):
        s = 0.0
        for k in range(m):
            ax = illum[k, 0] - centers[v, 0]
            ay = illum[k, 1] - centers[v, 1]
            az = illum[k, 2] - centers[v, 2]
            bx = detect[k, 0] - centers[v, 0]
            by = detect[k, 1] - centers[v, 1]
            bz = detect[k, 2] - centers[v, 2]
            ri2 = ax * ax + ay * ay + az * az
            rd2 = bx * bx + by * by + bz * bz
            f = (np.sqrt(ri2) + np.sqrt(rd2)) * inv_cdt - t0_bins
            fl = np.floor(f)
            if fl < -1.0 or fl >= n_t:
                continue
            j = int(fl)
            fr = f - fl
            g = 0.0
            if j >= 0:
                g += (1.0 - fr) * hist[k, j]
            if j + 1 < n_t:
                g += fr * hist[k, j + 1]
            s += weight * g / (ri2 * rd2)
        out[v] = s
    return out


@njit(parallel=True, cache=True)
def block_match(blocks, lattice_shape, window, n_keep):
    """Indices of the ``n_keep`` closest blocks (plain SSD) around each block.

    ``blocks`` is (n_blocks, block_len) in lexicographic lattice order.  The
    reference itself always comes first; remaining candidates are ranked by
    distance with ties resolved by lattice order (stable sort).  Rows are
    padded with -1 when the window holds fewer than ``n_keep`` blocks.
    """
    la, lb, lc = lattice_shape[0], lattice_shape[1], lattice_shape[2]
    nb = blocks.shape[0]
    plen = blocks.shape[1]
    members = -np.ones((nb, n_keep), dtype=np.int64)
    side = 2 * window + 1
    for ref in prange(nb):
        a = ref // (lb * lc)
        b = (ref // lc) % lb
        c = ref % lc
        cand = np.empty(side * side * side, dtype=np.int64)
        dist = np.empty(side * side * side)
        nc = 0
        for aa in range(max(0, a - window), min(la, a + window + 1)):
            for bb in range(max(0, b - window), min(lb, b + window + 1)):
                for cc in range(max(0, c - window), min(lc, c + window + 1)):
                    idx = (aa * lb + bb) * lc + cc
                    if idx == ref:
                        dist[nc] = -1.0
                    else:
                        s = 0.0
                        for t in range(plen):
                            e = blocks[idx, t] - blocks[ref, t]
                            s += e * e
                        dist[nc] = s
                    cand[nc] = idx
                    nc += 1
        order = np.argsort(dist[:nc], kind="mergesort")
        for t in range(min(n_keep, nc)):
            members[ref, t] = cand[order[t]]
    return members
