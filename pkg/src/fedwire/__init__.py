"""Discrete-event simulator of federated averaging over stochastic wireless uplinks."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
