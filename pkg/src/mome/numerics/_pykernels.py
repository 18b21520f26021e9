"""NumPy implementations of the row kernels (fallback when the extension is absent)."""
import numpy as np
from scipy.special import erf

_SQRT_HALF = 0.70710678118654752440
_INV_SQRT_2PI = 0.39894228040143267794


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_backward(x, g):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def layer_norm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(g, xhat, rstd, gamma):
    gh = g * gamma
    s1 = gh.mean(axis=1, keepdims=True)
    s2 = (gh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gh - s1 - xhat * s2)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def softmax_forward(x):
    finite = bool(np.isfinite(x).all())
    with np.errstate(invalid="ignore", over="ignore"):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
    # subnormal probabilities slow every later matmul; flush them like the C path
    y[y < np.finfo(y.dtype).tiny] = 0.0
    return y, finite


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))
