"""Exception types shared across the package."""


class FlatFedError(Exception):
    """Base class for all package errors."""


class ConfigError(FlatFedError):
    """Invalid experiment configuration or incompatible arguments."""


class UsageError(FlatFedError):
    """API called outside its contract (e.g. backward on a non-scalar tape)."""


class DataFormatError(FlatFedError):
    """Malformed on-disk data (CIFAR binaries, checkpoints, exports)."""


class GeometryError(FlatFedError):
    """Degenerate geometric input (collinear plane anchors etc.)."""


class NumericsError(FlatFedError):
    """Numerical failure (NaN in a Hessian-vector product and similar)."""
