"""Exception types shared across the package.

Argument errors that a caller can fix (bad ranges, inconsistent options)
raise plain ValueError; the types below mark failures with a structural
cause that tests and the CLI want to tell apart.
"""


class ShapeError(ValueError):
    """An array has the wrong rank, extent, or channel count."""


class ParseError(ValueError):
    """A label or config file is malformed.

    Messages carry ``path:line`` so the offending file location is
    visible in logs without a traceback.
    """


class SceneGenerationError(RuntimeError):
    """Scene synthesis could not place the requested objects."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, truncated, or not ours."""


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; a diagnostic checkpoint may exist."""
