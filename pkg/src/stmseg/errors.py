"""Exception and warning types shared across the package."""


class StmsegError(Exception):
    """Base class for errors raised by this package."""


class SingularCovarianceError(StmsegError, ValueError):
    """A covariance that must be inverted is singular or badly conditioned."""


class BlockConsistencyError(StmsegError, ValueError):
    """A transition matrix does not aggregate consistently over a stage map."""


class ModelFormatError(StmsegError, ValueError):
    """A serialized model is malformed, has the wrong version or is invalid."""


class TrainingError(StmsegError, RuntimeError):
    """Training could not produce a valid model."""


class FallbackWarning(UserWarning):
    """A degenerate input forced an estimator onto its declared default."""
