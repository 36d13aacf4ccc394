"""Prototype-conditioned diffusion anomaly detection over token features."""

from .autodiff import Tensor, Tape, backward, grad_check
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "Rng",
    "__version__",
]
