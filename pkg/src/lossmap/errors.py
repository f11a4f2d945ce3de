"""Exception hierarchy shared by every lossmap module."""
from __future__ import annotations


class LossmapError(Exception):
    """Base class for all errors raised by lossmap."""


class ContractError(LossmapError, ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class NonFiniteError(LossmapError, ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed.

    ``index`` identifies the offending example or coordinate when known and
    ``last_finite`` carries the last finite iterate for optimizers.
    """

    def __init__(self, message: str, index: int | None = None, last_finite=None):
        super().__init__(message)
        self.index = index
        self.last_finite = last_finite


class HessianCapError(ContractError):
    """Dense Hessian requested for a model above the parameter cap."""


class FingerprintMismatch(LossmapError):
    """A database was used with a different architecture or dataset."""


class PersistenceError(LossmapError):
    """A saved file could not be decoded into a consistent object."""


class TransitionStateFailure(LossmapError):
    """Eigenvector-following did not end on a verified index-1 saddle."""

    def __init__(self, message: str, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues
