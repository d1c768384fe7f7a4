"""Extractive conversational question answering on a from-scratch numpy stack:
autodiff tensors, a small transformer encoder, span/rationale/class heads,
adversarial and distillation regularizers, the CoQA metric, and GA ensembling."""

from .errors import (
    BudgetError,
    CheckpointError,
    ComputationError,
    ContractError,
    ConvQAError,
    CorpusParseError,
    DimensionError,
    IntegrityError,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "CheckpointError",
    "ComputationError",
    "ContractError",
    "ConvQAError",
    "CorpusParseError",
    "DimensionError",
    "IntegrityError",
    "__version__",
]
