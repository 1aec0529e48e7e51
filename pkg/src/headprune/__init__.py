"""Attention-head pruning lab: differentiable subset pruning and baselines on small Transformers."""

from .errors import (
    ComplexityGuardError,
    ContractError,
    DimensionError,
    DivergenceError,
    DomainError,
    GenerationError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "ComplexityGuardError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "DomainError",
    "GenerationError",
    "NumericError",
    "__version__",
]
