class VrkfError(Exception):
    """
    Base class for every error raised by this package.
    """


class ModelError(VrkfError, ValueError):
    """
    A linear model is malformed (asymmetric or indefinite covariance, inconsistent shapes).
    """


class DimensionError(ModelError):
    """
    Model, noise specs, inputs and measurements disagree on a dimension.
    """


class CovarianceError(VrkfError, ValueError):
    """
    A covariance matrix could not be factorized.
    """


class LossError(VrkfError, ValueError):
    """
    Invalid robust loss parameters.
    """


class DivergenceError(VrkfError, RuntimeError):
    """
    A fixed-point iterate became non-finite or left the admissible region.
    """

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step


class BoundError(VrkfError, ValueError):
    """
    A convergence-bound precondition is violated.
    """


class ConfigError(VrkfError, ValueError):
    """
    A configuration file, CSV row or registry lookup is invalid.
    """
