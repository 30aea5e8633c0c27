"""Laplacian-of-Gaussian filtered back-projection (LOG-BP)."""
import numpy as np
from scipy.ndimage import gaussian_laplace

from . import _kernels
from .core import SignalSet
from .errors import GridMismatchError, ParameterError
from .transport import SINGULAR_DISTANCE, TransportOperator


class ScalarTransport:
    """Scalar transport with kernel ``volume / (|x_i - x|^2 |x_d - x|^2)``.

    Same timing and bin splitting as TransportOperator, without the
    directional numerator.  ``adjoint`` is the back-projection.
    """

    def __init__(self, grid, illum, detect, n_t, bin_width, t0, c):
        self.grid = grid
        self.illum = np.ascontiguousarray(illum, dtype=float).reshape(-1, 3)
        self.detect = np.ascontiguousarray(detect, dtype=float).reshape(-1, 3)
        self.n_t = int(n_t)
        self._centers = np.ascontiguousarray(grid.centers())
        self._args = (self.n_t, 1.0 / (c * bin_width), t0 / bin_width, grid.voxel_volume)
        # reuse the singularity guard of the vector operator
        TransportOperator(grid, self.illum[:1], self.detect[:1], 1, bin_width, t0, c)
        for p in np.concatenate([self.illum, self.detect]):
            if np.min(np.linalg.norm(self._centers - p, axis=1)) < SINGULAR_DISTANCE:
                TransportOperator(grid, p[None], p[None], 1, bin_width, t0, c)

    @classmethod
    def for_signal(cls, grid, signal: SignalSet):
        return cls(grid, signal.illum, signal.detect, signal.n_t, signal.bin_width, signal.t0, signal.c)

    def forward(self, vol):
        vol = np.asarray(vol, dtype=float)
        if vol.shape != self.grid.shape:
            raise GridMismatchError(f"volume shape {vol.shape} differs from grid {self.grid.shape}")
        return _kernels.scalar_forward(self._centers, np.ascontiguousarray(vol.ravel()), self.illum,
                                       self.detect, *self._args)

    def adjoint(self, hist):
        hist = np.ascontiguousarray(hist, dtype=float)
        if hist.shape != (self.illum.shape[0], self.n_t):
            raise GridMismatchError(f"histogram shape {hist.shape} does not match the pairs")
        return _kernels.scalar_adjoint(self._centers, hist, self.illum, self.detect,
                                       *self._args).reshape(self.grid.shape)


def back_project(signal, grid, clamp=True):
    """Back-projected scalar volume of a SignalSet (negative values clamped to 0)."""
    vol = ScalarTransport.for_signal(grid, signal).adjoint(signal.histogram)
    return np.maximum(vol, 0.0) if clamp else vol


def log_filter(volume, sigma=1.0):
    """Negated Laplacian of Gaussian (zero padding, kernel cut at 3 sigma), clamped to >= 0."""
    if not np.all(np.asarray(sigma) > 0):
        raise ParameterError("sigma must be positive")
    out = -gaussian_laplace(np.asarray(volume, dtype=float), sigma, mode="constant", cval=0.0,
                            truncate=3.0)
    return np.maximum(out, 0.0)


def log_bp(signal, grid, sigma=1.0):
    """LOG-BP albedo volume."""
    return log_filter(back_project(signal, grid), sigma)
