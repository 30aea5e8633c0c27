"""Select between the numba kernels and the pure-numpy fallback.

Set ``CCSOCR_PURE_NUMPY=1`` in the environment before import to force the
numpy path (numba is also skipped automatically when it cannot be imported).
"""
import os

_FLAG = os.environ.get("CCSOCR_PURE_NUMPY", "").strip().lower()

# the TBB layer is often present but too old; workqueue ships with numba itself
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def set_threads(n):
    """Limit the number of threads used by the parallel numba kernels."""
    if USE_NUMBA and n:
        import numba

        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
