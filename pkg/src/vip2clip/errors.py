"""Exception types raised across the package."""


class Vip2ClipError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(Vip2ClipError, ValueError):
    """Invalid input or configuration (CLI exit code 1)."""


class ShapeMismatch(ValidationError):
    pass


class ZeroNorm(ValidationError):
    pass


class KTooLarge(ValidationError):
    pass


class NonFiniteTensor(ValidationError):
    pass


class BadImageSize(ValidationError):
    pass


class BadPromptLength(ValidationError):
    pass


class EmptyLayerList(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class GraphNotRecorded(Vip2ClipError, RuntimeError):
    pass


class SingleClass(ValidationError):
    pass


class NoPositives(ValidationError):
    pass


class NoRegions(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class IoError(Vip2ClipError, OSError):
    """File-system or decoding failure (CLI exit code 2)."""


class MissingMask(IoError):
    pass


class UnreadableImage(IoError):
    pass


class CheckpointFormatError(IoError):
    pass
