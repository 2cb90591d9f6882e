"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: input/validation problems (DataError,
DomainError, ShapeError, StateError and subclasses) exit 2, numeric failures
(NumericError) exit 3.
"""


class BranchDiffError(Exception):
    """Base class for all package errors."""


class DomainError(BranchDiffError):
    """An argument is outside its mathematical domain (e.g. t not in [0, T])."""


class DataError(BranchDiffError):
    """Malformed or inconsistent input data."""


class ShapeError(BranchDiffError):
    """Array shape or dimension mismatch."""


class StateError(BranchDiffError):
    """Operation called in an invalid state (e.g. backward on a spent tape)."""


class NumericError(BranchDiffError):
    """Numerical failure: NaN gradients, indefinite covariance, etc."""


class UnknownClassError(DomainError):
    """A class label is not part of the hierarchy or dataset."""


class CheckpointError(DataError):
    """Corrupt or unreadable checkpoint file."""
