"""Kernel backend selection.

Two interchangeable backends implement the hot loops (conv2d, maxpool2d,
bilinear resize, batchnorm sweeps, relu backward): a compiled Cython
extension and a pure-numpy fallback.  FLUIDSEG_BACKEND picks one explicitly
("cython" or "numpy"); the default "auto" prefers the extension and silently
falls back when it is missing.
"""

import os

from ..errors import ConfigError
from . import numpy_backend

_CHOICE = os.environ.get("FLUIDSEG_BACKEND", "auto").lower()
if _CHOICE not in ("auto", "cython", "numpy"):
    raise ConfigError(f"FLUIDSEG_BACKEND must be auto, cython or numpy, got {_CHOICE!r}")

if _CHOICE == "numpy":
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import _convkernels as _impl
        BACKEND = "cython"
    except ImportError:
        if _CHOICE == "cython":
            raise ConfigError("FLUIDSEG_BACKEND=cython but the compiled extension is missing")
        _impl = numpy_backend
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
bn2d_stats = _impl.bn2d_stats
bn2d_grad_stats = _impl.bn2d_grad_stats
bn2d_apply = _impl.bn2d_apply
bn2d_grad_input = _impl.bn2d_grad_input
relu_backward = _impl.relu_backward


def get_backend():
    """Name of the active backend: "cython" or "numpy"."""
    return BACKEND
