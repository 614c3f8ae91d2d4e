"""Surface reconstruction from images through a learned 2D chart.

An image network predicts per-pixel NOCS coordinates, a foreground mask and
a 2D chart coordinate; a surface network maps (shape code, chart uv) to a 3D
point. Submodules:

- ``synthcam``: procedural shapes and ray-cast multi-view datasets
- ``netcore``: the image and surface networks
- ``losses``: training losses and correspondence mining
- ``trainer``: two-phase training with deterministic resume
- ``chart2mesh``: chart unwrapping, texturing and mesh extraction
- ``metrics``: reconstruction, correspondence, consistency and discontinuity metrics
- ``cli``: the ``surfchart`` command line
"""
from .errors import (CameraError, CheckpointCorruptError, CheckpointError, ConfigurationError,
                     IncompatibleCheckpointError, RenderError, ShapeMismatchError,
                     SurfchartError, TrainingDivergedError)

__version__ = "0.1.0"

__all__ = [
    "SurfchartError", "ConfigurationError", "CameraError", "RenderError",
    "ShapeMismatchError", "CheckpointError", "CheckpointCorruptError",
    "IncompatibleCheckpointError", "TrainingDivergedError", "__version__",
]
