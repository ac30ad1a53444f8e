"""Exception hierarchy shared across the package."""


class MetaBNError(Exception):
    """Base class for every error raised by metabn."""


class ShapeMismatch(MetaBNError, ValueError):
    pass


class NonFinite(MetaBNError, FloatingPointError):
    pass


class NotScalar(MetaBNError, ValueError):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class BatchTooSmall(MetaBNError, ValueError):
    pass


class ModeViolation(MetaBNError, RuntimeError):
    pass


class LayoutMismatch(MetaBNError, ValueError):
    pass


class NonSquare(ShapeMismatch):
    pass


class HeadMismatch(MetaBNError, ValueError):
    pass


class MissingTarget(MetaBNError, ValueError):
    pass


class EmptySupport(MetaBNError, ValueError):
    pass


class EmptyMetaBatch(MetaBNError, ValueError):
    pass


class ScopeViolation(MetaBNError, RuntimeError):
    pass


class DataExhausted(MetaBNError, RuntimeError):
    pass


class DivergenceDetected(MetaBNError, FloatingPointError):
    pass


class EmptyTestSet(MetaBNError, ValueError):
    pass


class EmptyBatch(MetaBNError, ValueError):
    pass


class TooFewDomains(MetaBNError, ValueError):
    pass


class InvalidSpec(MetaBNError, ValueError):
    pass


class InsufficientSamples(MetaBNError, ValueError):
    pass


class CorruptFile(MetaBNError, ValueError):
    pass


class TruncatedFile(CorruptFile):
    pass


class ConfigError(MetaBNError, ValueError):
    pass
