"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class GSComposeError(Exception):
    exit_code = 1


class ConfigError(GSComposeError):
    """Invalid configuration, manifest, or missing input file."""

    exit_code = 2


class InvalidGaussianError(GSComposeError, ValueError):
    exit_code = 2


class BehindCameraError(GSComposeError, ValueError):
    exit_code = 7


class DirectorError(GSComposeError):
    exit_code = 3


class DirectorUnreachable(DirectorError):
    pass


class DirectorMalformed(DirectorError):
    pass


class DirectorProtocolError(DirectorError):
    """Stages queried out of order (scale, then endpoints, then path)."""


class TrajectoryDegenerate(GSComposeError):
    exit_code = 4


class DepthMissing(GSComposeError):
    exit_code = 5

    def __init__(self, message, index=None, object_id=None):
        super().__init__(message)
        self.index = index
        self.object_id = object_id


class MotionNotFound(GSComposeError):
    exit_code = 2


class RefinementDiverged(GSComposeError):
    exit_code = 6


class GradientInvalid(RefinementDiverged):
    pass


class RotationDegenerate(RefinementDiverged):
    pass


class RenderError(GSComposeError):
    exit_code = 7


class StageError(GSComposeError):
    """Wraps a failure with the pipeline stage (and object) it came from."""

    def __init__(self, stage, cause, object_id=None):
        where = f"stage={stage}" + (f" object={object_id}" if object_id else "")
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.cause = cause
        self.object_id = object_id
        self.exit_code = getattr(cause, "exit_code", 1)
