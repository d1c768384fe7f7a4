"""Exception types shared across the package."""


class ConvQAError(Exception):
    """Base class for all package errors."""


class DimensionError(ConvQAError, ValueError):
    pass


class ComputationError(ConvQAError, ArithmeticError):
    pass


class ContractError(ConvQAError, ValueError):
    """A documented precondition was violated by the caller."""


class CorpusParseError(ConvQAError, ValueError):
    pass


class IntegrityError(ConvQAError, ValueError):
    pass


class CheckpointError(ConvQAError, ValueError):
    pass


class BudgetError(ConvQAError, ValueError):
    """Exhaustive search refused because the candidate count is too large."""
