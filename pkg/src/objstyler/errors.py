"""Exception taxonomy shared by all modules."""


class ObjstylerError(Exception):
    """Base class for every error raised by this package."""


class RejectedInputError(ObjstylerError):
    """Input violates a hard precondition (non-finite pixels, empty text)."""


class DegenerateInputError(ObjstylerError):
    """Structurally valid input with no usable signal (zero-norm vector, empty set)."""


class ConfigurationError(ObjstylerError):
    """Bad parameter or unknown name (layer, backend, option)."""


class ShapeError(ObjstylerError):
    """Array shape or rectangle bounds violation."""


class CheckpointError(ObjstylerError):
    """Checkpoint file missing, corrupt, or from an incompatible format."""


class DegenerateTextError(ObjstylerError):
    """Source and target text encode to the same vector; no direction to follow."""


class DegenerateSimilarityError(ObjstylerError):
    """All patch-to-image similarities are non-positive; no distribution to build."""


class DegenerateMaskError(ObjstylerError):
    """A metric was asked to run on an empty mask region."""


class GroundingFailureError(ObjstylerError):
    """No foreground region could be grounded for the source text."""

    def __init__(self, source_text: str):
        super().__init__(f"no region grounded for '{source_text}'")
        self.source_text = source_text


class TrainingDivergenceError(ObjstylerError):
    """A loss term went non-finite during optimization."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class BackendLoadError(ObjstylerError):
    """A real model backend could not be constructed (weights missing, import failure)."""
