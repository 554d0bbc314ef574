class NNCAError(Exception):
    """Base exception for nnca."""


class ConfigError(NNCAError):
    """Raised for config file parsing or validation errors."""


class GeometryError(NNCAError):
    """Raised for invalid point sets or tree parameters."""


class KernelError(NNCAError):
    """Raised for unknown kernels or out-of-range entry requests."""


class DimensionError(NNCAError):
    """Raised when vector or matrix shapes do not match."""


class SolverError(NNCAError):
    """Raised when an iterative solve cannot be started or continued."""


class TrainingError(NNCAError):
    """Raised when SVM training preconditions fail or the gradient blows up."""


class ModelFormatError(NNCAError):
    """Raised when a persisted SVM model file cannot be parsed."""
