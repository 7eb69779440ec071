"""Exception types shared across the package."""


class PromptsegError(Exception):
    """Base class for all package errors."""


class InvalidConfig(PromptsegError):
    """A configuration field violates its constraint."""


class ShapeMismatch(PromptsegError):
    """An array does not have the shape required by the operation."""


class DimMismatch(PromptsegError):
    """A token or embedding has the wrong width."""


class DegenerateBox(PromptsegError):
    """Box smaller than the 2-pixel minimum in either dimension."""


class OutOfBounds(PromptsegError):
    """A coordinate lies outside the image."""


class TooManyParts(PromptsegError):
    """More part labels than the query capacity S."""


class NonFinite(PromptsegError):
    """NaN or Inf where a finite value is required."""


class NonFiniteLoss(PromptsegError):
    """Training loss became NaN/Inf; carries step diagnostics."""


class VersionMismatch(PromptsegError):
    """Checkpoint was written with an incompatible version or config."""


class CorruptFile(PromptsegError):
    """Checkpoint file is truncated or fails integrity checks."""


class MissingImage(PromptsegError):
    """An annotation references an image file that does not exist."""


class MalformedAnnotation(PromptsegError):
    """A COCO-style annotation is invalid; message names the annotation id."""


class InvalidFraction(PromptsegError):
    """Split fractions do not sum to one or are out of range."""


class EmptyEvaluation(PromptsegError):
    """No category qualifies for the requested metric."""


class GuardedMaskError(PromptsegError):
    """Ground-truth mask was read outside an evaluation context."""
