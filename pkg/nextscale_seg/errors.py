class SegmentationError(Exception):
    """Base class of all errors raised by nextscale_seg."""


class InvalidInputError(SegmentationError, ValueError):
    """Raised when an argument violates the operation's preconditions."""


class ConfigurationError(SegmentationError):
    """Raised for invalid or inconsistent configuration."""


class FormatError(SegmentationError):
    """Raised when a file on disk is corrupt, truncated or of the wrong version."""


class StateError(SegmentationError):
    """Raised when a stateful object (e.g. a decoding cache) is used out of order."""


class DivergenceError(SegmentationError):
    """Raised when training produces a non-finite loss."""
