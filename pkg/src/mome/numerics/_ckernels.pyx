# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels: GELU, layer norm and softmax, forward and backward.

float32 GELU and softmax use the vectorisable approximations in _fastmath.h;
float64 goes through libm so finite-difference checks keep full precision.

All entry points take C-contiguous float32 or float64 arrays and return new
arrays of the same dtype. Reductions run left to right within a row so the
result is independent of thread count.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erf, erff, exp, expf, sqrt, sqrtf, isfinite

cnp.import_array()

cdef extern from "_fastmath.h" nogil:
    void mome_gelu_fwd_f(const float *x, float *y, Py_ssize_t n)
    void mome_gelu_bwd_f(const float *x, const float *g, float *out, Py_ssize_t n)
    int mome_softmax_rows_f(const float *x, float *y, Py_ssize_t rows, Py_ssize_t d)

ctypedef fused real:
    float
    double

cdef double SQRT_HALF = 0.70710678118654752440
cdef double INV_SQRT_2PI = 0.39894228040143267794


cdef void _gelu_fwd(const real[::1] x, real[::1] y) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        if real is float:
            y[i] = 0.5 * x[i] * (1.0 + erff(x[i] * <float>SQRT_HALF))
        else:
            y[i] = 0.5 * x[i] * (1.0 + erf(x[i] * SQRT_HALF))


cdef void _gelu_bwd(const real[::1] x, const real[::1] g, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real cdf, pdf
    for i in range(n):
        if real is float:
            cdf = 0.5 * (1.0 + erff(x[i] * <float>SQRT_HALF))
            pdf = <float>INV_SQRT_2PI * expf(-0.5 * x[i] * x[i])
        else:
            cdf = 0.5 * (1.0 + erf(x[i] * SQRT_HALF))
            pdf = INV_SQRT_2PI * exp(-0.5 * x[i] * x[i])
        out[i] = g[i] * (cdf + x[i] * pdf)


def gelu_forward(cnp.ndarray x):
    y = np.empty_like(x)
    cdef float[::1] xf, yf
    if x.dtype == np.float32:
        xf = x.reshape(-1)
        yf = y.reshape(-1)
        if xf.shape[0]:
            mome_gelu_fwd_f(&xf[0], &yf[0], xf.shape[0])
    else:
        _gelu_fwd[double](x.reshape(-1), y.reshape(-1))
    return y


def gelu_backward(cnp.ndarray x, cnp.ndarray g):
    out = np.empty_like(x)
    cdef float[::1] xf, gf, of
    if x.dtype == np.float32:
        xf = x.reshape(-1)
        gf = g.reshape(-1)
        of = out.reshape(-1)
        if xf.shape[0]:
            mome_gelu_bwd_f(&xf[0], &gf[0], &of[0], xf.shape[0])
    else:
        _gelu_bwd[double](x.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


cdef void _ln_fwd(const real[:, ::1] x, const real[::1] gamma, const real[::1] beta,
                  double eps, real[:, ::1] y, real[:, ::1] xhat, real[::1] rstd) noexcept nogil:
    cdef Py_ssize_t r, j, n = x.shape[0], d = x.shape[1]
    cdef double mean, var, diff, inv
    for r in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[r, j]
        mean /= d
        var = 0.0
        for j in range(d):
            diff = x[r, j] - mean
            var += diff * diff
        var /= d
        inv = 1.0 / sqrt(var + eps)
        rstd[r] = <real>inv
        for j in range(d):
            xhat[r, j] = <real>((x[r, j] - mean) * inv)
            y[r, j] = xhat[r, j] * gamma[j] + beta[j]


cdef void _ln_bwd(const real[:, ::1] g, const real[:, ::1] xhat, const real[::1] rstd,
                  const real[::1] gamma, real[:, ::1] gx, double[::1] ggamma,
                  double[::1] gbeta) noexcept nogil:
    cdef Py_ssize_t r, j, n = g.shape[0], d = g.shape[1]
    cdef double s1, s2, gh
    for r in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gh = g[r, j] * gamma[j]
            s1 += gh
            s2 += gh * xhat[r, j]
            ggamma[j] += g[r, j] * xhat[r, j]
            gbeta[j] += g[r, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gh = g[r, j] * gamma[j]
            gx[r, j] = <real>(rstd[r] * (gh - s1 - xhat[r, j] * s2))


def layer_norm_forward(cnp.ndarray x, cnp.ndarray gamma, cnp.ndarray beta, double eps):
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    if x.dtype == np.float32:
        _ln_fwd[float](x, gamma, beta, eps, y, xhat, rstd)
    else:
        _ln_fwd[double](x, gamma, beta, eps, y, xhat, rstd)
    return y, xhat, rstd


def layer_norm_backward(cnp.ndarray g, cnp.ndarray xhat, cnp.ndarray rstd, cnp.ndarray gamma):
    gx = np.empty_like(g)
    ggamma = np.zeros(g.shape[1], dtype=np.float64)
    gbeta = np.zeros(g.shape[1], dtype=np.float64)
    if g.dtype == np.float32:
        _ln_bwd[float](g, xhat, rstd, gamma, gx, ggamma, gbeta)
    else:
        _ln_bwd[double](g, xhat, rstd, gamma, gx, ggamma, gbeta)
    return gx, ggamma.astype(g.dtype), gbeta.astype(g.dtype)


cdef int _softmax_fwd(const real[:, ::1] x, real[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t r, j, n = x.shape[0], d = x.shape[1]
    cdef double m, s, e
    cdef int bad = 0
    for r in range(n):
        m = x[r, 0]
        for j in range(d):
            if not isfinite(x[r, j]):
                bad = 1
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(d):
            if real is float:
                e = expf(x[r, j] - <float>m)
            else:
                e = exp(x[r, j] - m)
            y[r, j] = <real>e
            s += e
        for j in range(d):
            y[r, j] = <real>(y[r, j] / s)
    return bad


cdef void _softmax_bwd(const real[:, ::1] y, const real[:, ::1] g, real[:, ::1] gx) noexcept nogil:
    cdef Py_ssize_t r, j, n = y.shape[0], d = y.shape[1]
    cdef double dot
    for r in range(n):
        dot = 0.0
        for j in range(d):
            dot += g[r, j] * y[r, j]
        for j in range(d):
            gx[r, j] = <real>(y[r, j] * (g[r, j] - dot))


def softmax_forward(cnp.ndarray x):
    """Row softmax of a 2-D array; returns (y, all_finite)."""
    y = np.empty_like(x)
    cdef int bad = 0
    cdef float[:, ::1] xf, yf
    if x.dtype == np.float32:
        xf = x
        yf = y
        if xf.shape[0] and xf.shape[1]:
            bad = mome_softmax_rows_f(&xf[0, 0], &yf[0, 0], xf.shape[0], xf.shape[1])
    else:
        bad = _softmax_fwd[double](x, y)
    return y, not bad


def softmax_backward(cnp.ndarray y, cnp.ndarray g):
    gx = np.empty_like(y)
    if y.dtype == np.float32:
        _softmax_bwd[float](y, g, gx)
    else:
        _softmax_bwd[double](y, g, gx)
    return gx
