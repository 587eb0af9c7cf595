"""Exception hierarchy shared across the package."""

from __future__ import annotations


class HybridFLError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(HybridFLError, ValueError):
    def __init__(self, what: str, expected: int, actual: int):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected dimension {expected}, got {actual}")


class EmptyDatasetError(HybridFLError, ValueError):
    def __init__(self, msg: str = "empty dataset"):
        super().__init__(msg)


class BatchSizeError(HybridFLError, ValueError):
    pass


class NonFiniteError(HybridFLError, FloatingPointError):
    def __init__(self, msg: str, round: int | None = None, client_id: int | None = None):
        self.round = round
        self.client_id = client_id
        where = []
        if round is not None:
            where.append(f"round={round}")
        if client_id is not None:
            where.append(f"client={client_id}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(msg + suffix)


class PartitionError(HybridFLError, ValueError):
    pass


class IdxFormatError(HybridFLError, ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class SamplingError(HybridFLError, ValueError):
    pass


class AggregationError(HybridFLError, ValueError):
    pass


class BoundInputError(HybridFLError, ValueError):
    pass


class ConfigError(HybridFLError, ValueError):
    def __init__(self, msg: str, key: str | None = None):
        self.key = key
        super().__init__(msg)


class TrainingAborted(HybridFLError, RuntimeError):
    """Raised when a round fails; carries the partial trace up to the failure."""

    def __init__(self, cause: BaseException, trace):
        self.cause = cause
        self.trace = trace
        super().__init__(f"training aborted: {cause}")


class CompareError(HybridFLError, ValueError):
    pass
