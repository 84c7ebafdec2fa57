"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class DegenerateBatchError(ValueError):
    """A batch or evaluation set contains no positions that count towards the loss."""


class IngestionError(ValueError):
    """Corpus input could not be turned into a vocabulary or batches."""


class EvaluationError(ArithmeticError):
    """A function under gradient check produced a non-finite value."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient norm."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated or malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CompatibilityError(ValueError):
    """A checkpoint and a vocabulary do not belong together."""
