# unips_system/core/exceptions.py


class UnipsError(Exception):
    """Base exception for every failure raised by the unips_system package."""
    pass


class DimensionError(UnipsError):
    """Raised when tensor shapes are incompatible for an operation."""
    pass


class ParameterError(UnipsError):
    """Raised when a numeric parameter of an operation is out of range."""
    pass


class ConfigurationError(UnipsError):
    """Raised when a configuration file or object is invalid."""
    pass


class ContractError(UnipsError):
    """Raised when a caller violates an operation precondition."""
    pass


class GradientError(ContractError):
    """Raised when backward is requested on something that cannot be differentiated."""
    pass


class OptimizerError(UnipsError):
    """Raised when the optimizer receives non-finite or mismatched gradients."""
    pass


class CheckpointError(UnipsError):
    """Raised when a checkpoint container cannot be written, read or matched to a config."""
    pass


class SceneLoadError(UnipsError):
    """Raised when a scene directory is missing files or holds corrupt data."""
    pass


class RenderError(UnipsError):
    """Raised when the renderer produces non-finite radiance."""
    pass


class GeometryBackboneError(UnipsError):
    """Raised when the frozen geometry backbone or its precomputed features are unavailable."""
    pass


class TrainingDivergedError(UnipsError):
    """Raised when a training loss becomes NaN or infinite."""
    pass


class DatasetWriteError(UnipsError):
    """Raised when a dataset file cannot be written to disk."""
    pass


class PipelineStageError(UnipsError):
    """Raised when one stage of the end-to-end smoke pipeline fails."""

    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
