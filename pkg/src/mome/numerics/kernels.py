"""Kernel backend selection.

The compiled extension is used when it imports; ``MOME_KERNELS=python`` forces
the NumPy fallback. Wrappers normalise layout (C-contiguous, 2-D rows) so both
backends see identical inputs.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("MOME_KERNELS", "").lower() not in ("python", "numpy", "py"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def available_backends():
    names = {"python": _pykernels}
    try:
        from . import _ckernels

        names["cython"] = _ckernels
    except ImportError:  # pragma: no cover
        pass
    return names


def use_backend(name):
    """Switch the active backend at runtime (used by benchmarks and tests)."""
    global _impl, BACKEND
    impls = available_backends()
    if name not in impls:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(impls)}")
    _impl = impls[name]
    BACKEND = name


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def gelu_forward(x):
    return _impl.gelu_forward(np.ascontiguousarray(x))


def gelu_backward(x, g):
    return _impl.gelu_backward(np.ascontiguousarray(x), np.ascontiguousarray(g, dtype=x.dtype))


def layer_norm_forward(x, gamma, beta, eps):
    shape = x.shape
    y, xhat, rstd = _impl.layer_norm_forward(
        _rows(x), np.ascontiguousarray(gamma), np.ascontiguousarray(beta), float(eps)
    )
    return y.reshape(shape), xhat, rstd


def layer_norm_backward(g, xhat, rstd, gamma):
    gx, ggamma, gbeta = _impl.layer_norm_backward(
        _rows(g.astype(xhat.dtype, copy=False)), xhat, rstd, np.ascontiguousarray(gamma)
    )
    return gx.reshape(g.shape), ggamma, gbeta


def softmax_forward(x):
    """Softmax over the last axis. Returns ``(y, all_finite)``."""
    y, finite = _impl.softmax_forward(_rows(x))
    return y.reshape(x.shape), finite


def softmax_backward(y, g):
    return _impl.softmax_backward(_rows(y), _rows(g.astype(y.dtype, copy=False))).reshape(y.shape)
