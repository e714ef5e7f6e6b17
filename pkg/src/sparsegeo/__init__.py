"""Entropy-guided sparse refinement of coarse dense geometry."""

from .errors import DivergenceError, EmptyEvaluation, InconsistencyError, InvalidArgument, InvalidInput
from .geo import DenseMap, MapKind, MetricReport, ValidityMask

__version__ = "0.1.0"
