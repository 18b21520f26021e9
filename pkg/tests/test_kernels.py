"""Both kernel backends against float64 references."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf
from scipy.special import softmax as sp_softmax

from mome.numerics import kernels

BACKENDS = kernels.available_backends()


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_compiled_backend_present():
    # the build is expected to produce the extension; the fallback alone would hide regressions
    assert "cython" in BACKENDS
    assert kernels.BACKEND in BACKENDS


def _tol(dtype):
    return dict(rtol=2e-6, atol=2e-6) if dtype == np.float32 else dict(rtol=1e-12, atol=1e-12)


def _gelu_ref(x):
    x = x.astype(np.float64)
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 40)),
              elements=st.floats(-30, 30, allow_nan=False))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_gelu_forward_backward(impl, dtype):
    x = np.linspace(-9, 9, 301).astype(dtype).reshape(7, 43)
    np.testing.assert_allclose(impl.gelu_forward(x), _gelu_ref(x), **_tol(dtype))
    g = np.ones_like(x)
    d = 0.5 * (1 + erf(x / np.sqrt(2))) + x * np.exp(-0.5 * x.astype(np.float64) ** 2) / np.sqrt(2 * np.pi)
    np.testing.assert_allclose(impl.gelu_backward(x, g), d, **_tol(dtype))


def test_gelu_values(impl):
    for dtype in (np.float32, np.float64):
        y = impl.gelu_forward(np.array([[0.0, 1.0, 10.0]], dtype=dtype))[0]
        assert y[0] == 0.0
        assert abs(y[1] - 0.84134) < 1e-4
        assert abs(y[2] - 10.0) < 1e-4


@settings(max_examples=40, deadline=None)
@given(rows)
def test_softmax_matches_reference(x):
    for impl in BACKENDS.values():
        for dtype in (np.float32, np.float64):
            y, finite = impl.softmax_forward(np.ascontiguousarray(x.astype(dtype)))
            assert finite
            np.testing.assert_allclose(y, sp_softmax(x.astype(dtype).astype(np.float64), axis=1),
                                       rtol=1e-5 if dtype == np.float32 else 1e-12, atol=1e-7)
            assert np.all(y >= 0) and np.allclose(y.sum(1), 1.0, atol=1e-6)


def test_softmax_examples(impl):
    y, _ = impl.softmax_forward(np.array([[0.0, 0.0], [1000.0, 0.0]]))
    np.testing.assert_array_equal(y, [[0.5, 0.5], [1.0, 0.0]])
    y, _ = impl.softmax_forward(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(y[0], [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_flags_non_finite(impl):
    for bad in (np.nan, np.inf):
        for dtype in (np.float32, np.float64):
            _, finite = impl.softmax_forward(np.array([[0.0, bad, 1.0]], dtype=dtype))
            assert not finite


def test_softmax_has_no_subnormal_outputs(impl):
    # subnormal probabilities make every later GEMM several times slower
    x = np.array([[0.0, -90.0, -100.0, -200.0, -1e9]], dtype=np.float32)
    y, _ = impl.softmax_forward(x)
    tiny = np.finfo(np.float32).tiny
    assert np.all((y == 0) | (np.abs(y) >= tiny))
    assert y[0, 0] == 1.0


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_backward(impl, dtype):
    rng = np.random.default_rng(0)
    y = sp_softmax(rng.standard_normal((5, 9)), axis=1).astype(dtype)
    g = rng.standard_normal((5, 9)).astype(dtype)
    ref = y * (g - (g * y).sum(1, keepdims=True))
    np.testing.assert_allclose(impl.softmax_backward(y, g), ref, rtol=1e-5, atol=1e-6)


def _ln_ref(x, gamma, beta, eps):
    x = x.astype(np.float64)
    mu = x.mean(1, keepdims=True)
    var = x.var(1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_layer_norm_forward(impl, dtype):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 64)).astype(dtype) * 3 + 1
    gamma = rng.standard_normal(64).astype(dtype)
    beta = rng.standard_normal(64).astype(dtype)
    y, xhat, rstd = impl.layer_norm_forward(x, gamma, beta, 1e-6)
    np.testing.assert_allclose(y, _ln_ref(x, gamma, beta, 1e-6), rtol=1e-4, atol=1e-5)
    assert xhat.shape == x.shape and rstd.shape[0] == 6


def test_layer_norm_backward_matches_finite_differences(impl):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8))
    gamma = rng.standard_normal(8)
    beta = rng.standard_normal(8)
    w = rng.standard_normal((3, 8))
    _, xhat, rstd = impl.layer_norm_forward(x, gamma, beta, 1e-6)
    gx, gg, gb = impl.layer_norm_backward(w, xhat, rstd, gamma)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = ((_ln_ref(xp, gamma, beta, 1e-6) - _ln_ref(xm, gamma, beta, 1e-6)) * w).sum() / (2 * h)
    np.testing.assert_allclose(gx, num, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(gg, (w * (x - x.mean(1, keepdims=True))
                                    / np.sqrt(x.var(1, keepdims=True) + 1e-6)).sum(0), rtol=1e-9)
    np.testing.assert_allclose(gb, w.sum(0), rtol=1e-12)


def test_backends_agree_float64():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    c, p = BACKENDS["cython"], BACKENDS["python"]
    x = np.random.default_rng(3).standard_normal((16, 48))
    np.testing.assert_allclose(c.gelu_forward(x), p.gelu_forward(x), rtol=1e-13)
    np.testing.assert_allclose(c.softmax_forward(x)[0], p.softmax_forward(x)[0], rtol=1e-13)


def test_use_backend_switch():
    before = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.BACKEND == "python"
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(before)


def test_env_var_forces_fallback():
    env = dict(os.environ, MOME_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from mome.numerics import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_model_forward_agrees_across_backends(model, pairs64):
    patches, _ = pairs64
    before = kernels.BACKEND
    outs = {}
    try:
        for name in BACKENDS:
            kernels.use_backend(name)
            outs[name] = model.encode("image", patches=patches[:4]).hidden.data
    finally:
        kernels.use_backend(before)
    ref = outs["python"]
    for y in outs.values():
        np.testing.assert_allclose(y, ref, rtol=1e-4, atol=1e-5)
