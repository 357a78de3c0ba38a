"""Exception types raised throughout the package."""


class DimensionError(ValueError):
    """Array shapes or dimension lists are inconsistent."""


class ModeIndexError(DimensionError, IndexError):
    """A 1-based mode index is outside ``1..N``."""


class StructureError(ValueError):
    """A tensor train or TT-matrix violates its rank-chain structure."""


class BoundaryError(StructureError):
    """A norm shift was requested past the first or last core."""


class KindError(TypeError):
    """An operation was applied to a model of the wrong decomposition kind."""


class CanonicalFormError(StructureError):
    """The tensor train is not in the mixed-canonical form an update needs."""


class FormatError(ValueError):
    """A binary file does not follow the expected layout."""


class NumericalError(ArithmeticError):
    """A factorization failed even after adding diagonal jitter.

    Parameters
    ----------
    message : str
        What failed.
    condition : float, optional
        Estimated condition number of the offending matrix.
    """

    def __init__(self, message, condition=None):
        if condition is not None:
            message = f"{message} (condition number ~ {condition:.3e})"
        super().__init__(message)
        self.condition = condition
