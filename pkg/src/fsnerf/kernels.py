"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``FSNERF_PURE_PYTHON=1`` to force the numpy kernels.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("FSNERF_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _real(*arrays):
    dtype = np.result_type(*arrays)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def composite_forward(sigma, delta, impl=None):
    sigma, delta = _real(sigma, delta)
    return (impl or _impl).composite_forward(sigma, delta)


def composite_backward(grad_weights, grad_final_trans, weights, trans, delta, impl=None):
    grad_weights, weights, trans, delta = _real(grad_weights, weights, trans, delta)
    grad_final_trans = np.ascontiguousarray(grad_final_trans, dtype=weights.dtype).reshape(-1)
    return (impl or _impl).composite_backward(grad_weights, grad_final_trans, weights, trans, delta)


def scatter(u, v, z, values, height, width, band, min_weight, impl=None):
    u, v, z = (np.ascontiguousarray(a, dtype=np.float64).reshape(-1) for a in (u, v, z))
    values = np.asarray(values, dtype=np.float64)
    channels = values.shape[-1] if values.ndim > 1 else 1
    values = np.ascontiguousarray(values).reshape(u.shape[0], channels)
    return (impl or _impl).scatter(u, v, z, values, int(height), int(width), float(band), float(min_weight))
