"""Directional-albedo reconstruction for non-line-of-sight transient imaging."""
from .core import (SPEED_OF_LIGHT, DirectionalAlbedo, MeasurementPair, SignalSet,
                   VirtualConfocalSignal, VoxelGrid, albedo_of, hard_threshold, normal_of)
from .errors import (CCSOCRError, ConvergenceWarning, FormatError, GridMismatchError,
                     NumericalError, ParameterError, SingularGeometryError)
from .transport import TransportOperator, build_virtual_pairs, shared_pair_index

__version__ = "0.1.0"
