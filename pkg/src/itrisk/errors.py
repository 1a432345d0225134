"""Exception types raised across the package."""

import numpy as np


class InvalidParameterError(ValueError):
    """A numeric parameter lies outside its admissible range."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A covariance matrix failed to factorize."""


class TruthRequiredError(ValueError):
    """Ground-truth quantities were requested on an instance without them."""


class IncompleteTrajectoryError(ValueError):
    """A trajectory lacks the per-step Jacobian records needed downstream."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""
