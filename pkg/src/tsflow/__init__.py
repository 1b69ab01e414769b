"""Conditional flow matching with Gaussian-process priors for time series."""

from tsflow._accel import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
