# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Commonly used data structures and errors."""

import enum


class BlockType(str, enum.Enum):
    PLAIN = 'plain'
    RESNET_BASIC = 'resnet-basic'
    RESNET_BOTTLENECK = 'resnet-bottleneck'


class AttentionType(str, enum.Enum):
    NONE = 'none'
    SE = 'se'
    CBAM = 'cbam'
    TRIPLET = 'triplet'


class Mechanism(str, enum.Enum):
    """Attention mechanisms with a closed-form parameter count."""
    SE = 'se'
    CBAM = 'cbam'
    BAM = 'bam'
    GC = 'gc'
    TRIPLET = 'triplet'


class RotationVariant(str, enum.Enum):
    TRANSPOSE = 'transpose'
    TRANSPOSE_WITH_FLIP = 'transpose-with-flip'


class Mode(str, enum.Enum):
    TRAIN = 'train'
    EVAL = 'eval'


class ExitCode(enum.IntEnum):
    SUCCESS = 0
    USAGE = 1
    DATA_FORMAT = 2
    VERIFICATION = 3


class AttentionLibError(Exception):
    exit_code = ExitCode.USAGE


class DimensionError(AttentionLibError, ValueError):
    """Shapes do not line up (lengths, channels, broadcasting)."""


class ContractError(AttentionLibError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigurationError(AttentionLibError, ValueError):
    """Inconsistent layer, architecture or training configuration."""


class DegenerateBatchError(AttentionLibError, ValueError):
    """Batch statistics requested over a single element."""


class DataFormatError(AttentionLibError, ValueError):
    exit_code = ExitCode.DATA_FORMAT


class LayerLookupError(AttentionLibError, KeyError):
    """No layer with the requested name."""


class VerificationError(AttentionLibError, RuntimeError):
    exit_code = ExitCode.VERIFICATION


class NonFiniteLossError(AttentionLibError, ArithmeticError):
    """Training produced a NaN or infinite loss."""
    exit_code = ExitCode.VERIFICATION


def parse_enum(enum_cls, value, what):
    """Converts a string to an enum member, raising ConfigurationError."""
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        choices = ', '.join(member.value for member in enum_cls)
        raise ConfigurationError('unknown %s %r (expected one of: %s)' % (what, value, choices)) from None
