/* Vectorisable float32 kernels used by _ckernels.pyx.
 * exp: Cephes range reduction + degree-6 polynomial (about 1 ulp).
 * erf: Abramowitz-Stegun 7.1.26 (absolute error <= 1.5e-7).
 * Results that would be subnormal are flushed to zero: subnormal operands
 * make later matmuls an order of magnitude slower.
 */
#ifndef MOME_FASTMATH_H
#define MOME_FASTMATH_H

#include <math.h>
#include <stdint.h>
#include <string.h>

static inline float mome_expf(float x0) {
    float x = x0 < -87.3f ? -87.3f : x0;
    x = x > 88.3f ? 88.3f : x;
    float n = floorf(x * 1.44269504088896341f + 0.5f);
    float r = x - n * 0.693359375f + n * 2.12194440e-4f;
    float r2 = r * r;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r2 + r + 1.0f;
    int32_t bits = ((int32_t)n + 127) << 23;
    float scale;
    memcpy(&scale, &bits, sizeof(scale));
    return x0 < -87.3f ? 0.0f : p * scale;
}

/* erf(|x|) given t = 1/(1+p|x|) and e = exp(-x*x) */
static inline float mome_erf_abs(float t, float e) {
    float poly = ((((1.061405429f * t - 1.453152027f) * t + 1.421413741f) * t
                   - 0.284496736f) * t + 0.254829592f) * t;
    return 1.0f - poly * e;
}

static inline void mome_gelu_fwd_f(const float *x, float *y, Py_ssize_t n) {
    for (Py_ssize_t i = 0; i < n; i++) {
        float v = x[i] * 0.70710678118654752f;
        float a = fabsf(v);
        float t = 1.0f / (1.0f + 0.3275911f * a);
        float e = mome_expf(-v * v);
        float erf_a = mome_erf_abs(t, e);
        float erf_v = v < 0.0f ? -erf_a : erf_a;
        y[i] = 0.5f * x[i] * (1.0f + erf_v);
    }
}

static inline void mome_gelu_bwd_f(const float *x, const float *g, float *out, Py_ssize_t n) {
    for (Py_ssize_t i = 0; i < n; i++) {
        float v = x[i] * 0.70710678118654752f;
        float a = fabsf(v);
        float t = 1.0f / (1.0f + 0.3275911f * a);
        float e = mome_expf(-v * v);
        float erf_a = mome_erf_abs(t, e);
        float erf_v = v < 0.0f ? -erf_a : erf_a;
        float cdf = 0.5f * (1.0f + erf_v);
        float pdf = 0.39894228040143268f * e;
        out[i] = g[i] * (cdf + x[i] * pdf);
    }
}

/* row softmax; returns nonzero when any input is non-finite */
static inline int mome_softmax_rows_f(const float *x, float *y, Py_ssize_t rows, Py_ssize_t d) {
    const Py_ssize_t n = rows * d;
    uint32_t bad = 0;
    for (Py_ssize_t i = 0; i < n; i++) {
        uint32_t b;
        memcpy(&b, x + i, sizeof(b));
        bad |= (b & 0x7f800000u) == 0x7f800000u;
    }
    /* rows are short (sequence length), so exponentiate the whole buffer
     * in one long vectorised pass between the per-row reductions */
    for (Py_ssize_t r = 0; r < rows; r++) {
        const float *xr = x + r * d;
        float *yr = y + r * d;
        float m = xr[0];
        for (Py_ssize_t j = 1; j < d; j++) {
            m = xr[j] > m ? xr[j] : m;
        }
        for (Py_ssize_t j = 0; j < d; j++) {
            yr[j] = xr[j] - m;
        }
    }
    for (Py_ssize_t i = 0; i < n; i++) {
        y[i] = mome_expf(y[i]);
    }
    for (Py_ssize_t r = 0; r < rows; r++) {
        float *yr = y + r * d;
        float s = 0.0f;
        for (Py_ssize_t j = 0; j < d; j++) {
            s += yr[j];
        }
        float inv = 1.0f / s;
        for (Py_ssize_t j = 0; j < d; j++) {
            float v = yr[j] * inv;
            yr[j] = v < 1.1754944e-38f ? 0.0f : v;
        }
    }
    return bad != 0;
}

#endif
