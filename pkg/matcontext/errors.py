# This file is part of matcontext, local material recognition in global context.
"""Exception hierarchy shared by every module.

Each leaf also derives from the builtin that best describes it, so callers
that only care about ``ValueError`` or ``IOError`` keep working.
"""


class MatContextError(Exception):
    """Root of every error raised on purpose by matcontext."""


class ShapeError(MatContextError, ValueError):
    """Tensor extents do not satisfy an operation's preconditions."""


class ConfigError(MatContextError, ValueError):
    """A configuration value or file is malformed."""


class UnknownLayerError(ConfigError):
    """An injection layer name is not part of the network."""


class ContextError(MatContextError, ValueError):
    """Context is missing, superfluous, or not a probability map."""


class VocabularyError(MatContextError, ValueError):
    """A label or category name is not in the declared vocabulary."""


class EmptyLabelError(MatContextError, ValueError):
    """A loss or metric was asked for with no labeled pixel."""


class EmptySplitError(MatContextError, ValueError):
    """A dataset split came out empty."""


class TrainingDivergedError(MatContextError, RuntimeError):
    """The training loss stopped being finite."""


class ContainerError(MatContextError, IOError):
    """A serialized file cannot be decoded."""


class BadMagicError(ContainerError):
    """The file does not start with the expected magic bytes."""


class TruncatedPayloadError(ContainerError):
    """The file ends before its declared payload does."""


class LengthMismatchError(ContainerError):
    """Declared shapes and byte lengths disagree."""


class InvariantViolation(MatContextError, AssertionError):
    """An experiment's expected property did not hold."""
