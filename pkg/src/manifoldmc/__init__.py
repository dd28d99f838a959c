"""Constrained Hamiltonian Monte Carlo on lifted posterior manifolds."""

from .exceptions import DomainError, NumericalError
from .models import ModelSpec

__version__ = "0.1.0"

__all__ = ["ModelSpec", "DomainError", "NumericalError", "__version__"]
