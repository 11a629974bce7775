"""firesense: dual-branch fire-spread segmentation on a from-scratch autodiff core."""

from .kernels import KERNEL_BACKEND, available_backends
from .tensor import Tensor, backward, gradient_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "Tensor",
    "__version__",
    "available_backends",
    "backward",
    "gradient_check",
    "no_grad",
]
