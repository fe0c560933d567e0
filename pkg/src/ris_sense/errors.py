"""Typed error hierarchy shared across the package."""


class RisSenseError(Exception):
    """Base class for all package errors."""


class ShapeError(RisSenseError):
    """Invalid tensor shape: empty/zero dims, or operand shape mismatch."""


class InvalidRangeError(RisSenseError):
    """A numeric range parameter is empty or inverted (e.g. lo >= hi)."""


class NumericError(RisSenseError):
    """A computation produced a non-finite value where finiteness is required."""


class DegenerateBatchError(RisSenseError):
    """Batch statistics requested over fewer than two elements per channel."""


class InvalidModeError(RisSenseError):
    """Operation requires a different train/eval mode than the one supplied."""


class CorruptCacheError(RisSenseError):
    """A backward-pass cache is inconsistent with the forward that produced it."""


class InvalidProbabilityError(RisSenseError):
    """A probability parameter lies outside its valid interval."""


class LabelError(RisSenseError):
    """A class label is outside the valid index range."""


class LengthError(RisSenseError):
    """A sequence is too short for the requested transform."""


class AugmentParamError(RisSenseError):
    """An augmentation parameter is outside its documented range."""


class CapacityError(RisSenseError):
    """Campaign data cannot supply the number of samples a recipe requires."""


class IngestionError(RisSenseError):
    """A dataset entry could not be read from disk."""


class EmptySplitError(RisSenseError):
    """An evaluation split contains no entries."""


class CheckpointFormatError(RisSenseError):
    """Base class for checkpoint parsing failures."""


class BadMagicError(CheckpointFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(CheckpointFormatError):
    """Checkpoint version is not supported by this build."""


class TruncatedPayloadError(CheckpointFormatError):
    """Checkpoint payload is shorter than the header promises."""
