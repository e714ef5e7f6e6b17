"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A parameter is outside its allowed domain (bad size, fraction, kernel...)."""


class InvalidInput(ValueError):
    """Input data violates a value constraint (non-finite logits, gt <= 0, ...)."""


class EmptyEvaluation(ValueError):
    """A reduction was requested over an empty set of pixels or points."""


class InconsistencyError(RuntimeError):
    """Two structures that must agree do not (e.g. a core pixel with no refined row)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
