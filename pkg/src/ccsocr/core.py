"""Value types shared across the package, plus albedo/normal extraction and
the hard-thresholding operator.

Array layout is row-major with axes ``(depth x, horizontal y, vertical z)``
and, for vector fields, a trailing component axis of length 3.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import GridMismatchError, ParameterError

SPEED_OF_LIGHT = 3e8


def _vec3(value, name):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ParameterError(f"{name} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite")
    return tuple(float(x) for x in arr)


def _readonly(arr):
    arr = np.array(arr, dtype=float, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VoxelGrid:
    """Regular voxel grid.  ``shape`` is ``(n_x, n_y, n_z)``."""

    shape: Tuple[int, int, int]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ParameterError(f"voxel counts must be three integers >= 1, got {self.shape}")
        size = _vec3(self.voxel_size, "voxel_size")
        if min(size) <= 0:
            raise ParameterError("voxel sizes must be positive")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "origin", _vec3(self.origin, "origin"))
        object.__setattr__(self, "voxel_size", size)

    @classmethod
    def from_bounds(cls, shape, lower, upper):
        """Grid of ``shape`` voxels exactly filling the box ``[lower, upper]``."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        size = (upper - lower) / np.asarray(shape, dtype=float)
        return cls(tuple(shape), tuple(lower), tuple(size))

    @property
    def n_x(self):
        return self.shape[0]

    @property
    def n_y(self):
        return self.shape[1]

    @property
    def n_z(self):
        return self.shape[2]

    @property
    def n_voxels(self):
        return self.shape[0] * self.shape[1] * self.shape[2]

    @property
    def voxel_volume(self):
        return self.voxel_size[0] * self.voxel_size[1] * self.voxel_size[2]

    @property
    def upper(self):
        return tuple(o + n * h for o, n, h in zip(self.origin, self.shape, self.voxel_size))

    def axis_centers(self, axis):
        """Center coordinates along one axis (0 = depth, 1 = y, 2 = z)."""
        return self.origin[axis] + (np.arange(self.shape[axis]) + 0.5) * self.voxel_size[axis]

    def center(self, i1, i2, i3):
        idx = np.array([i1, i2, i3], dtype=float)
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.voxel_size)

    def centers(self):
        """All voxel centers as an ``(n_voxels, 3)`` array in row-major order."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)

    def to_dict(self):
        return {"shape": list(self.shape), "origin": list(self.origin),
                "voxel_size": list(self.voxel_size)}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["shape"]), tuple(data["origin"]), tuple(data["voxel_size"]))


@dataclass(frozen=True)
class MeasurementPair:
    """An (illumination point, detection point) pair in meters."""

    illum: Tuple[float, float, float]
    detect: Tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "illum", _vec3(self.illum, "illum"))
        object.__setattr__(self, "detect", _vec3(self.detect, "detect"))

    @property
    def confocal(self):
        return self.illum == self.detect


def pairs_to_arrays(pairs: Sequence[MeasurementPair]):
    """Split a pair list into ``(illum, detect)`` arrays of shape ``(M, 3)``."""
    illum = np.array([p.illum for p in pairs], dtype=float).reshape(-1, 3)
    detect = np.array([p.detect for p in pairs], dtype=float).reshape(-1, 3)
    return illum, detect


def arrays_to_pairs(illum, detect) -> List[MeasurementPair]:
    return [MeasurementPair(tuple(a), tuple(b)) for a, b in zip(illum, detect)]


@dataclass(frozen=True, eq=False)
class DirectionalAlbedo:
    """Directional albedo ``u``: albedo times unit normal at every voxel."""

    grid: VoxelGrid
    u: np.ndarray

    def __post_init__(self):
        u = _readonly(self.u)
        if u.shape != self.grid.shape + (3,):
            raise GridMismatchError(f"u has shape {u.shape}, grid expects {self.grid.shape + (3,)}")
        object.__setattr__(self, "u", u)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape + (3,)))

    def albedo(self):
        return albedo_of(self.u)

    def normal(self):
        return normal_of(self.u)

    def __eq__(self, other):
        if not isinstance(other, DirectionalAlbedo):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.u, other.u)


@dataclass(frozen=True, eq=False)
class SignalSet:
    """Transient histograms for ``M`` measurement pairs.

    ``illum`` and ``detect`` are ``(M, 3)`` arrays; ``histogram`` is
    ``(M, n_t)``.  Bin ``j`` covers ``[t0 + j*bin_width, t0 + (j+1)*bin_width)``.
    """

    illum: np.ndarray
    detect: np.ndarray
    histogram: np.ndarray
    bin_width: float
    t0: float = 0.0
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        illum = _readonly(np.asarray(self.illum, dtype=float).reshape(-1, 3))
        detect = _readonly(np.asarray(self.detect, dtype=float).reshape(-1, 3))
        hist = _readonly(self.histogram)
        if illum.shape != detect.shape:
            raise GridMismatchError("illum and detect must have the same number of points")
        if hist.ndim != 2 or hist.shape[0] != illum.shape[0]:
            raise GridMismatchError(f"histogram shape {hist.shape} does not match M={illum.shape[0]}")
        if not np.all(np.isfinite(illum)) or not np.all(np.isfinite(detect)):
            raise ParameterError("pair coordinates must be finite")
        if not self.bin_width > 0:
            raise ParameterError("bin_width must be positive")
        if not self.c > 0:
            raise ParameterError("c must be positive")
        object.__setattr__(self, "illum", illum)
        object.__setattr__(self, "detect", detect)
        object.__setattr__(self, "histogram", hist)
        object.__setattr__(self, "bin_width", float(self.bin_width))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "c", float(self.c))

    @classmethod
    def from_pairs(cls, pairs, histogram, bin_width, t0=0.0, c=SPEED_OF_LIGHT):
        illum, detect = pairs_to_arrays(pairs)
        return cls(illum, detect, histogram, bin_width, t0, c)

    @property
    def pairs(self) -> List[MeasurementPair]:
        return arrays_to_pairs(self.illum, self.detect)

    @property
    def n_pairs(self):
        return self.histogram.shape[0]

    @property
    def n_t(self):
        return self.histogram.shape[1]

    def with_histogram(self, histogram):
        return SignalSet(self.illum, self.detect, histogram, self.bin_width, self.t0, self.c)

    def __eq__(self, other):
        if not isinstance(other, SignalSet):
            return NotImplemented
        return (np.array_equal(self.illum, other.illum)
                and np.array_equal(self.detect, other.detect)
                and np.array_equal(self.histogram, other.histogram)
                and (self.bin_width, self.t0, self.c) == (other.bin_width, other.t0, other.c))


@dataclass(frozen=True, eq=False)
class VirtualConfocalSignal:
    """Confocal histograms ``d`` on a regular grid of virtual points.

    ``points`` is ``(m_y, m_z, 3)``; ``d`` is ``(m_y, m_z, n_t)``.
    """

    points: np.ndarray
    d: np.ndarray
    bin_width: float
    t0: float = 0.0
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        points = _readonly(self.points)
        d = _readonly(self.d)
        if points.ndim != 3 or points.shape[2] != 3 or d.shape[:2] != points.shape[:2]:
            raise GridMismatchError(f"points {points.shape} and d {d.shape} are inconsistent")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "d", d)

    @property
    def pairs(self) -> List[MeasurementPair]:
        flat = self.points.reshape(-1, 3)
        return arrays_to_pairs(flat, flat)

    def as_signal_set(self):
        flat = self.points.reshape(-1, 3)
        return SignalSet(flat, flat, self.d.reshape(flat.shape[0], -1), self.bin_width, self.t0, self.c)


def albedo_of(u):
    """Per-voxel Euclidean norm of a directional albedo (last axis)."""
    u = getattr(u, "u", u)
    u = np.asarray(u, dtype=float)
    # hypot avoids underflow of the squares for tiny components
    return np.hypot(np.hypot(u[..., 0], u[..., 1]), u[..., 2])


def normal_of(u):
    """Unit normals ``u / |u|``; zero vectors where the albedo vanishes."""
    u = getattr(u, "u", u)
    u = np.asarray(u, dtype=float)
    L = albedo_of(u)
    out = np.zeros_like(u)
    nz = L > 0
    out[nz] = u[nz] / L[nz, None]
    return out


def hard_threshold(a, y):
    """Elementwise hard threshold: keep ``a`` where ``|a| >= y``, else 0."""
    if not np.all(np.asarray(y) > 0):
        raise ParameterError(f"threshold must be positive, got {y}")
    a = np.asarray(a, dtype=float)
    return np.where(np.abs(a) >= y, a, 0.0)
