"""Exception types shared across the package."""


class DepthShapeError(ValueError):
    """Base class for all errors raised by depthshape."""


class EmptyInputError(DepthShapeError):
    """No valid pixels / pairs / points left to operate on."""


class DegenerateInputError(DepthShapeError):
    """Input has zero range, zero variance or is otherwise rank deficient."""


class DomainError(DepthShapeError):
    """A parameter lies outside its admissible domain."""


class ObjectiveUndefinedError(DepthShapeError):
    """The distortion objective cannot be evaluated (no planar structure)."""


class RecoveryFailedError(DepthShapeError):
    """Shift/focal recovery could not evaluate any candidate."""


class FormatError(DepthShapeError):
    """A depth file is malformed. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
