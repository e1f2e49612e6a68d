"""Learned generative data costs for optical flow.

Density models of optical-flow warp error (brightness/gradient constancy
baselines, CSAD, and Gaussian mixtures) plus dense flow estimation with
an expected-patch-log-likelihood data cost optimized by half-quadratic
splitting.
"""

from .errors import (ConfigError, DimensionMismatchError, FitError,
                     FormatError, WarpcostError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionMismatchError",
    "FitError",
    "FormatError",
    "WarpcostError",
    "__version__",
]
