"""Progressive face super-resolution with facial-landmark attention."""

__version__ = "0.1.0"

from .tensor import Tensor, Rng, no_grad, grad  # noqa: F401
