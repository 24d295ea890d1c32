"""Vessel trajectory similarity from auto-encoded trajectory images, with DTW and Frechet baselines."""

from .errors import DataError, DivergedError

__version__ = "0.1.0"

__all__ = ["DataError", "DivergedError", "__version__"]
