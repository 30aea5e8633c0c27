"""Discretized linear transient transport operator and virtual confocal pairs.

For a pair (x_i, x_d) and a voxel centered at x, the directional albedo u(x)
contributes

    volume * ((x_d - x) . u(x)) / (|x_i - x|^2 |x_d - x|^3)

at the arrival time (|x_i - x| + |x_d - x|) / c, split linearly between the
two straddling time bins.  The adjoint uses the identical weights.
"""
import numpy as np

from . import _kernels
from .core import (SPEED_OF_LIGHT, DirectionalAlbedo, MeasurementPair, SignalSet,
                   pairs_to_arrays)
from .errors import GridMismatchError, ParameterError, SingularGeometryError

SINGULAR_DISTANCE = 1e-9
# largest (unique points x voxels) table kept in memory for the table strategy
TABLE_LIMIT = 16_000_000


def _as_arrays(pairs_or_arrays):
    if isinstance(pairs_or_arrays, tuple) and len(pairs_or_arrays) == 2 and not isinstance(
            pairs_or_arrays[0], MeasurementPair):
        illum, detect = pairs_or_arrays
        return np.asarray(illum, dtype=float).reshape(-1, 3), np.asarray(detect, dtype=float).reshape(-1, 3)
    return pairs_to_arrays(list(pairs_or_arrays))


def virtual_columns(n, count=None):
    """Column indices of a (possibly coarse) virtual grid along one axis.

    ``count=None`` keeps every column; otherwise ``count`` columns are spread
    evenly, each at the center of its ``n / count`` wide cell.
    """
    if count is None or count >= n:
        return np.arange(n)
    if count < 1:
        raise ParameterError("virtual grid needs at least one column")
    return np.floor((np.arange(count) + 0.5) * n / count).astype(np.int64)


def virtual_points(grid, plane_depth, columns_y=None, columns_z=None):
    """Virtual confocal points, shape ``(m_y, m_z, 3)``, at voxel-column centers."""
    cy = np.arange(grid.n_y) if columns_y is None else np.asarray(columns_y)
    cz = np.arange(grid.n_z) if columns_z is None else np.asarray(columns_z)
    ys = grid.axis_centers(1)[cy]
    zs = grid.axis_centers(2)[cz]
    pts = np.empty((cy.size, cz.size, 3))
    pts[..., 0] = plane_depth
    pts[..., 1] = ys[:, None]
    pts[..., 2] = zs[None, :]
    return pts


def build_virtual_pairs(grid, plane_depth, columns_y=None, columns_z=None):
    """One confocal pair per voxel column, projected onto the plane ``x = plane_depth``."""
    flat = virtual_points(grid, plane_depth, columns_y, columns_z).reshape(-1, 3)
    return [MeasurementPair(tuple(p), tuple(p)) for p in flat]


def timing_window(grid, illum, detect, bin_width, c=SPEED_OF_LIGHT, margin=2):
    """``(t0, n_t)`` covering every voxel-center path length, with ``margin`` spare bins."""
    centers = grid.centers()
    lo, hi = np.inf, -np.inf
    for a, b in zip(np.asarray(illum).reshape(-1, 3), np.asarray(detect).reshape(-1, 3)):
        rho = np.linalg.norm(centers - a, axis=1) + np.linalg.norm(centers - b, axis=1)
        lo = min(lo, rho.min())
        hi = max(hi, rho.max())
    step = c * bin_width
    first = max(0, int(np.floor(lo / step)) - margin)
    n_t = int(np.ceil(hi / step)) - first + margin + 1
    return first * bin_width, n_t


class TransportOperator:
    """Linear map from a directional albedo on ``grid`` to transient histograms.

    Parameters
    ----------
    grid : VoxelGrid
    illum, detect : (M, 3) arrays of illumination / detection points in meters.
        A list of MeasurementPair is accepted through ``from_pairs``.
    n_t : number of time bins.
    bin_width : bin width in seconds.
    t0 : time of the leading edge of bin 0.
    c : speed of light.

    The quadrature weight is the voxel volume.  Voxel centers closer than
    1e-9 m to any relay point raise SingularGeometryError.
    """

    def __init__(self, grid, illum, detect, n_t, bin_width, t0=0.0, c=SPEED_OF_LIGHT,
                 _lattice=None):
        if int(n_t) < 1:
            raise ParameterError("n_t must be >= 1")
        if not bin_width > 0 or not c > 0:
            raise ParameterError("bin_width and c must be positive")
        self.grid = grid
        self.illum = np.ascontiguousarray(illum, dtype=float).reshape(-1, 3)
        self.detect = np.ascontiguousarray(detect, dtype=float).reshape(-1, 3)
        if self.illum.shape != self.detect.shape:
            raise GridMismatchError("illum and detect differ in length")
        self.n_t = int(n_t)
        self.bin_width = float(bin_width)
        self.t0 = float(t0)
        self.c = float(c)
        self.quadrature_weight = grid.voxel_volume
        self._inv_cdt = 1.0 / (self.c * self.bin_width)
        self._t0_bins = self.t0 / self.bin_width
        self._centers = np.ascontiguousarray(grid.centers())
        self._lattice = _lattice
        if _lattice is not None:
            self.strategy = "lattice"
            self._setup_lattice(*_lattice)
        else:
            self._setup_pairs()

    @classmethod
    def from_pairs(cls, grid, pairs, n_t, bin_width, t0=0.0, c=SPEED_OF_LIGHT):
        illum, detect = pairs_to_arrays(pairs)
        return cls(grid, illum, detect, n_t, bin_width, t0, c)

    @classmethod
    def for_signal(cls, grid, signal):
        return cls(grid, signal.illum, signal.detect, signal.n_t, signal.bin_width, signal.t0, signal.c)

    @classmethod
    def virtual(cls, grid, plane_depth, n_t, bin_width, t0=0.0, c=SPEED_OF_LIGHT,
                columns_y=None, columns_z=None):
        """Operator for confocal virtual pairs at voxel-column centers on a depth plane.

        Uses the translation invariance of the confocal kernel along y and z,
        so its geometry tables are only ``n_x * n_y * n_z`` large.
        """
        cy = np.arange(grid.n_y) if columns_y is None else np.asarray(columns_y, dtype=np.int64)
        cz = np.arange(grid.n_z) if columns_z is None else np.asarray(columns_z, dtype=np.int64)
        flat = virtual_points(grid, plane_depth, cy, cz).reshape(-1, 3)
        return cls(grid, flat, flat, n_t, bin_width, t0, c, _lattice=(float(plane_depth), cy, cz))

    # -- setup -------------------------------------------------------------

    def _setup_pairs(self):
        both = np.concatenate([self.illum, self.detect])
        points, inverse = np.unique(both, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        m = self.illum.shape[0]
        self._points = np.ascontiguousarray(points)
        self._ia = np.ascontiguousarray(inverse[:m], dtype=np.int64)
        self._id = np.ascontiguousarray(inverse[m:], dtype=np.int64)
        use_table = points.shape[0] * self._centers.shape[0] <= TABLE_LIMIT
        self.strategy = "table" if use_table else "direct"
        if use_table:
            diff = points[:, None, :] - self._centers[None, :, :]
            dist = np.sqrt(np.einsum("pvk,pvk->pv", diff, diff))
            del diff
            self._check_singular(dist.min() if dist.size else np.inf)
            self._dist = dist
            self._inv_r2 = 1.0 / (dist * dist)
            self._inv_r3 = 1.0 / (dist * dist * dist)
        else:
            closest = np.inf
            for p in points:
                d = self._centers - p
                closest = min(closest, np.sqrt(np.einsum("ij,ij->i", d, d)).min())
            self._check_singular(closest)

    def _setup_lattice(self, plane_depth, cy, cz):
        g = self.grid
        xs = g.axis_centers(0)
        self._ys = g.axis_centers(1)
        self._zs = g.axis_centers(2)
        self._cols_y = np.ascontiguousarray(cy, dtype=np.int64)
        self._cols_z = np.ascontiguousarray(cz, dtype=np.int64)
        self._dir_x = np.ascontiguousarray(plane_depth - xs)
        oy = np.arange(g.n_y) * g.voxel_size[1]
        oz = np.arange(g.n_z) * g.voxel_size[2]
        r = np.sqrt(self._dir_x[:, None, None] ** 2 + oy[None, :, None] ** 2 + oz[None, None, :] ** 2)
        self._check_singular(r.min())
        self._fbin = np.ascontiguousarray((r + r) * self._inv_cdt - self._t0_bins)
        self._kern = np.ascontiguousarray(
            self.quadrature_weight * (1.0 / (r * r)) * (1.0 / (r * r * r)))

    @staticmethod
    def _check_singular(closest):
        if closest < SINGULAR_DISTANCE:
            raise SingularGeometryError(
                f"a voxel center lies {closest:.3g} m from a relay point (< {SINGULAR_DISTANCE} m)")

    # -- properties --------------------------------------------------------

    @property
    def n_pairs(self):
        return self.illum.shape[0]

    @property
    def shape(self):
        """``(rows, cols)`` of the operator viewed as a matrix."""
        return (self.n_pairs * self.n_t, 3 * self.grid.n_voxels)

    @property
    def pairs(self):
        return [MeasurementPair(tuple(a), tuple(b)) for a, b in zip(self.illum, self.detect)]

    @property
    def lattice_shape(self):
        """``(m_y, m_z)`` of a virtual operator, else None."""
        if self._lattice is None:
            return None
        return (self._cols_y.size, self._cols_z.size)

    def matches(self, signal):
        return (np.array_equal(self.illum, signal.illum) and np.array_equal(self.detect, signal.detect)
                and self.n_t == signal.n_t and self.bin_width == signal.bin_width
                and self.t0 == signal.t0 and self.c == signal.c)

    # -- array-level maps --------------------------------------------------

    def forward(self, u):
        """``A u`` for a raw ``(n_x, n_y, n_z, 3)`` array; returns ``(M, n_t)``."""
        u = np.asarray(u, dtype=float)
        if u.shape != self.grid.shape + (3,):
            raise GridMismatchError(f"u has shape {u.shape}, operator grid is {self.grid.shape}")
        args = (self.n_t, self._inv_cdt, self._t0_bins, self.quadrature_weight)
        if self.strategy == "lattice":
            return _kernels.lattice_forward(np.ascontiguousarray(u), self._cols_y, self._cols_z,
                                            self._dir_x, self._ys, self._zs, self._fbin,
                                            self._kern, self.n_t)
        flat = np.ascontiguousarray(u.reshape(-1, 3))
        if self.strategy == "table":
            return _kernels.transport_forward_table(self._centers, flat, self._points, self._ia,
                                                    self._id, self._dist, self._inv_r2,
                                                    self._inv_r3, *args)
        return _kernels.transport_forward(self._centers, flat, self.illum, self.detect, *args)

    def adjoint(self, hist):
        """``A^T s`` for a raw ``(M, n_t)`` array; returns ``(n_x, n_y, n_z, 3)``."""
        hist = np.ascontiguousarray(hist, dtype=float)
        if hist.shape != (self.n_pairs, self.n_t):
            raise GridMismatchError(f"histogram shape {hist.shape}, expected {(self.n_pairs, self.n_t)}")
        args = (self.n_t, self._inv_cdt, self._t0_bins, self.quadrature_weight)
        if self.strategy == "lattice":
            return _kernels.lattice_adjoint(hist, np.array(self.grid.shape, dtype=np.int64),
                                            self._cols_y, self._cols_z, self._dir_x, self._ys,
                                            self._zs, self._fbin, self._kern, self.n_t)
        if self.strategy == "table":
            out = _kernels.transport_adjoint_table(self._centers, hist, self._points, self._ia,
                                                   self._id, self._dist, self._inv_r2,
                                                   self._inv_r3, *args)
        else:
            out = _kernels.transport_adjoint(self._centers, hist, self.illum, self.detect, *args)
        return out.reshape(self.grid.shape + (3,))

    def gram(self, u):
        """``A^T A u``."""
        return self.adjoint(self.forward(u))

    def gram_diagonal(self):
        """Diagonal of ``A^T A`` (squared column norms), shaped like ``u``."""
        out = _kernels.transport_gram_diagonal(self._centers, self.illum, self.detect, self.n_t,
                                               self._inv_cdt, self._t0_bins, self.quadrature_weight)
        return out.reshape(self.grid.shape + (3,))

    # -- typed maps --------------------------------------------------------

    def apply(self, u):
        """Simulated signal of a DirectionalAlbedo, as a SignalSet."""
        if u.grid != self.grid:
            raise GridMismatchError("albedo grid differs from operator grid")
        return SignalSet(self.illum, self.detect, self.forward(u.u), self.bin_width, self.t0, self.c)

    def apply_adjoint(self, s):
        """Adjoint image of a SignalSet defined on this operator's pairs."""
        if not (np.array_equal(s.illum, self.illum) and np.array_equal(s.detect, self.detect)):
            raise GridMismatchError("signal pairs differ from operator pairs")
        return DirectionalAlbedo(self.grid, self.adjoint(s.histogram))

    def dense(self):
        """Materialize the operator column by column (tiny problems only)."""
        ncol = 3 * self.grid.n_voxels
        cols = np.empty((self.n_pairs * self.n_t, ncol))
        e = np.zeros(ncol)
        for j in range(ncol):
            e[j] = 1.0
            cols[:, j] = self.forward(e.reshape(self.grid.shape + (3,))).ravel()
            e[j] = 0.0
        return cols


def apply(op, u):
    return op.apply(u)


def apply_adjoint(op, s):
    return op.apply_adjoint(s)


def shared_pair_index(b_pairs, d_pairs, tol=1e-6, d_shape=None):
    """Match measured pairs to virtual confocal pairs.

    ``b_pairs`` / ``d_pairs`` are lists of MeasurementPair or ``(illum, detect)``
    array tuples.  ``d_shape=(m_y, m_z)`` gives the virtual grid layout (by
    default the d-pairs are treated as a single row).  A b-pair matches a d-pair
    when both its illumination and detection points lie within ``tol``; each
    b-pair keeps only its nearest match (summed distance), ties going to the
    lexicographically smallest ``(k2, k3)``.

    Returns a list of ``(k_b, (k2, k3))``.
    """
    if tol < 0:
        raise ParameterError("tol must be >= 0")
    bi, bd = _as_arrays(b_pairs)
    di, dd = _as_arrays(d_pairs)
    if d_shape is None:
        d_shape = (1, di.shape[0])
    out = []
    if bi.shape[0] == 0 or di.shape[0] == 0:
        return out
    chunk = max(1, 4_000_000 // di.shape[0])
    for start in range(0, bi.shape[0], chunk):
        a = bi[start:start + chunk, None, :] - di[None, :, :]
        b = bd[start:start + chunk, None, :] - dd[None, :, :]
        ea = np.sqrt(np.einsum("mpk,mpk->mp", a, a))
        eb = np.sqrt(np.einsum("mpk,mpk->mp", b, b))
        ok = (ea <= tol) & (eb <= tol)
        score = np.where(ok, ea + eb, np.inf)
        best = np.argmin(score, axis=1)
        for row, j in enumerate(best):
            if ok[row, j]:
                out.append((start + row, tuple(int(x) for x in np.unravel_index(j, d_shape))))
    return out
