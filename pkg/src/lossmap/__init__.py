"""Energy-landscape exploration and interpretation of small tanh classifiers."""
from __future__ import annotations

from .data import Dataset, gen_checkerboard, load_csv, save_csv, standardize
from .errors import (ContractError, FingerprintMismatch, HessianCapError, LossmapError,
                     NonFiniteError, PersistenceError, TransitionStateFailure)
from .landscape import LandscapeDatabase, build_disconnectivity, emit_graph
from .model import Architecture, EdgeIndex, Objective

__version__ = "0.1.0"

__all__ = [
    "Architecture", "ContractError", "Dataset", "EdgeIndex", "FingerprintMismatch",
    "HessianCapError", "LandscapeDatabase", "LossmapError", "NonFiniteError", "Objective",
    "PersistenceError", "TransitionStateFailure", "build_disconnectivity", "emit_graph",
    "gen_checkerboard", "load_csv", "save_csv", "standardize",
]
