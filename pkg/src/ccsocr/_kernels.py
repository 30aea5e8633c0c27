"""Kernel dispatch: numba when available and enabled, numpy otherwise."""
from ._accel import USE_NUMBA

if USE_NUMBA:
    from ._kernels_numba import (  # noqa: F401
        block_match,
        lattice_adjoint,
        lattice_forward,
        scalar_adjoint,
        scalar_forward,
        transport_adjoint,
        transport_adjoint_table,
        transport_forward,
        transport_forward_table,
        transport_gram_diagonal,
    )
else:
    from ._kernels_numpy import (  # noqa: F401
        block_match,
        lattice_adjoint,
        lattice_forward,
        scalar_adjoint,
        scalar_forward,
        transport_adjoint,
        transport_adjoint_table,
        transport_forward,
        transport_forward_table,
        transport_gram_diagonal,
    )

BACKEND = "numba" if USE_NUMBA else "numpy"
