class SurfchartError(Exception):
    pass


class ConfigurationError(SurfchartError, ValueError):
    pass


class CameraError(SurfchartError, ValueError):
    pass


class RenderError(SurfchartError):
    pass


class ShapeMismatchError(SurfchartError, ValueError):
    pass


class CheckpointError(SurfchartError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class TrainingDivergedError(SurfchartError, FloatingPointError):
    pass
