"""Convolution kernel backend selection.

The compiled extension (``firesense._ckernels``) is used for float32 work when
it imported cleanly; the pure-numpy implementation is the fallback and also
serves every float64 request (the gradient-check path runs in 64-bit).
``FIRESENSE_KERNELS=np`` forces the fallback, ``=cy`` requires the extension.
"""

import os

import numpy as np

from . import _kernels_np

_choice = os.environ.get("FIRESENSE_KERNELS", "auto")
_ck = None
if _choice in ("auto", "cy"):
    try:
        from . import _ckernels as _ck
    except ImportError:
        if _choice == "cy":
            raise
        _ck = None

KERNEL_BACKEND = "cython" if _ck is not None else "numpy"


def _all_f32(*arrs) -> bool:
    return all(a.dtype == np.float32 for a in arrs)


def conv2d_forward(x, w, b, stride, pad):
    if _ck is not None and _all_f32(x, w, b):
        return _ck.conv2d_forward(x, w, b, stride, pad)
    return _kernels_np.conv2d_forward(x, w, b, stride, pad)


def conv2d_backward(x, w, gy, stride, pad):
    if _ck is not None and _all_f32(x, w, gy):
        return _ck.conv2d_backward(x, w, gy, stride, pad)
    return _kernels_np.conv2d_backward(x, w, gy, stride, pad)


def available_backends() -> list[str]:
    return ["cython", "numpy"] if _ck is not None else ["numpy"]
