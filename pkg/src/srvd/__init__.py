"""Joint super-resolution and vehicle detection on aerial imagery.

The package trains a multi-scale adversarial upsampler together with a
grid-based single-class detector, evaluates both with the standard
full-reference image metrics and detection metrics, and exposes the
whole pipeline through the ``srvd`` command line tool.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ParseError,
    SceneGenerationError,
    ShapeError,
    TrainingDiverged,
)

__all__ = [
    "CheckpointError",
    "ParseError",
    "SceneGenerationError",
    "ShapeError",
    "TrainingDiverged",
    "__version__",
]
