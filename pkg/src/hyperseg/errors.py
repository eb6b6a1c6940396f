"""Exception types shared across the package."""


class HypersegError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(HypersegError):
    """Operands have incompatible dimensions."""


class EmptySupervisionError(HypersegError):
    """A loss or split was requested but no labeled nodes are available."""


class EmptyEvaluationError(HypersegError):
    """An evaluation was requested but no scorable pixels exist."""


class ManifestError(HypersegError):
    """A dataset manifest is missing, malformed, or references bad paths."""


class FormatError(HypersegError):
    """A binary file has a bad magic, version, or truncated payload."""
