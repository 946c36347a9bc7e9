"""Exception hierarchy shared by every module of the package."""


class FlexLoraError(Exception):
    """Base class for all errors raised by flexlora."""


class InvalidMatrix(FlexLoraError, ValueError):
    pass


class ShapeMismatch(FlexLoraError, ValueError):
    pass


class RankOutOfRange(FlexLoraError, ValueError):
    pass


class NoContributions(FlexLoraError, ValueError):
    pass


class HeterogeneousRanksUnsupported(FlexLoraError, ValueError):
    """Raised when naive factor averaging meets clients of different ranks.

    This is the bucket effect: elementwise averaging of B and A only works
    when every participant trains the same rank.
    """


class InvalidDecay(FlexLoraError, ValueError):
    pass


class EmptyBatch(FlexLoraError, ValueError):
    pass


class InvalidConfig(FlexLoraError, ValueError):
    pass


class DatasetTooSmall(FlexLoraError, ValueError):
    pass


class PoolExhausted(FlexLoraError, RuntimeError):
    pass


class InvalidDistribution(FlexLoraError, ValueError):
    pass
