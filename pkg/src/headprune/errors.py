"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A NaN or infinity reached an operation boundary."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class ContractError(RuntimeError):
    """A caller broke a usage contract (wrong gate length, double backward, ...)."""


class ComplexityGuardError(ValueError):
    """Exact enumeration refused because it would blow up combinatorially."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
