"""Exception hierarchy shared by every module in the package."""


class GraphBackdoorError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""


class DataError(GraphBackdoorError):
    """Bad input data (exit code 2)."""


class NumericError(GraphBackdoorError):
    """Numerical failure (exit code 3)."""


class InvalidGraph(DataError):
    pass


class HostTooSmall(DataError):
    pass


class InvalidTrigger(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NotAPermutation(DataError):
    pass


class UnknownType(DataError):
    pass


class BadT(DataError):
    pass


class BadDistribution(DataError):
    pass


class OutOfRange(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class InsufficientHosts(DataError):
    pass


class BadDims(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class TooLarge(DataError):
    pass


class ConfigError(DataError):
    pass


class CheckpointError(DataError):
    pass


class SdfError(DataError):
    """Structured SDF parse failure carrying the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MalformedCountsLine(SdfError):
    pass


class TruncatedBlock(SdfError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
