"""Monte Carlo solvers and verification checks for entropy-penalised robust mean-field games."""
from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
