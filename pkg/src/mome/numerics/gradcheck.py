"""Central finite-difference checks of the analytic gradients.

Everything here runs in float64. A check compares the gradient produced by
:func:`backward` against ``(f(x + h) - f(x - h)) / 2h`` coordinate by
coordinate, using ``|a - n| / max(|a|, |n|, floor)`` as the error measure.
"""
from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .tensor import DIFFERENTIABLE_OPS, Tensor, backward, no_grad

REL_TOL = 1e-3
STEP = 1e-5
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} max_rel_err={self.max_rel_error:.3e} coords={self.checked}"


def relative_error(analytic, numeric, floor=FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn, array, coords, h=STEP):
    """Finite-difference derivative of ``loss_fn()`` w.r.t. ``array`` at flat ``coords``.

    ``array`` is perturbed in place and restored.
    """
    flat = array.reshape(-1)
    out = np.empty(len(coords))
    with no_grad():
        for k, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            plus = float(loss_fn().data)
            flat[c] = orig - h
            minus = float(loss_fn().data)
            flat[c] = orig
            out[k] = (plus - minus) / (2.0 * h)
    return out


def check_function(name, loss_fn, tensors, coords_per_tensor=None, rng=None, tol=REL_TOL):
    """Compare analytic and numeric gradients of scalar ``loss_fn()`` w.r.t. ``tensors``.

    ``coords_per_tensor=None`` checks every coordinate; an int samples that many
    per tensor with ``rng``.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    checked = 0
    for t in tensors:
        n = t.data.size
        if coords_per_tensor is None or coords_per_tensor >= n:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=coords_per_tensor, replace=False))
        analytic = np.zeros(len(coords)) if t.grad is None else t.grad.reshape(-1)[coords]
        numeric = numeric_gradient(loss_fn, t.data, coords)
        err = relative_error(analytic, numeric)
        worst = max(worst, float(err.max(initial=0.0)))
        checked += len(coords)
    return CheckResult(name, worst, checked, worst < tol)


def _leaf(rng, *shape, low=None, high=None):
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.standard_normal(shape)
    return Tensor(data.astype(np.float64), requires_grad=True)


def _case(rng, name):
    """Return ``(inputs, forward)`` for op ``name``; forward maps inputs to an op output."""
    r = rng
    if name == "add":
        return [_leaf(r, 3, 4), _leaf(r, 4)], lambda a, b: T.add(a, b)
    if name == "sub":
        return [_leaf(r, 3, 1), _leaf(r, 1, 4)], lambda a, b: T.sub(a, b)
    if name == "mul":
        return [_leaf(r, 2, 3, 4), _leaf(r, 3, 1)], lambda a, b: T.mul(a, b)
    if name == "div":
        return [_leaf(r, 3, 4), _leaf(r, 3, 4, low=0.5, high=2.0)], lambda a, b: T.div(a, b)
    if name == "power":
        return [_leaf(r, 3, 4, low=0.5, high=2.0)], lambda a: T.power(a, 2.5)
    if name == "exp":
        return [_leaf(r, 3, 4)], T.exp
    if name == "log":
        return [_leaf(r, 3, 4, low=0.5, high=3.0)], T.log
    if name == "clamp":
        data = np.array([[-2.0, -0.5, 0.3], [0.7, 1.6, 2.4]])
        return [Tensor(data, requires_grad=True)], lambda a: T.clamp(a, -1.0, 2.0)
    if name == "sum":
        return [_leaf(r, 3, 4, 2)], lambda a: T.tsum(a, axis=1)
    if name == "mean":
        return [_leaf(r, 3, 4, 2)], lambda a: T.mean(a, axis=(0, 2), keepdims=True)
    if name == "reshape":
        return [_leaf(r, 3, 4)], lambda a: T.reshape(a, (2, 6))
    if name == "transpose":
        return [_leaf(r, 2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))
    if name == "getitem":
        idx = np.array([0, 2, 2])
        return [_leaf(r, 4, 3)], lambda a: T.concat([a[1:3, ::2], a[idx][:, :2]], axis=0)
    if name == "concat":
        return [_leaf(r, 2, 3), _leaf(r, 4, 3)], lambda a, b: T.concat([a, b], axis=0)
    if name == "embedding":
        ids = np.array([[1, 3], [3, 0]])
        return [_leaf(r, 5, 4)], lambda w: T.embedding(w, ids)
    if name == "matmul":
        return [_leaf(r, 2, 3, 4), _leaf(r, 4, 5)], lambda a, b: T.matmul(a, b)
    if name == "linear":
        return ([_leaf(r, 2, 3, 4), _leaf(r, 4, 5), _leaf(r, 5)],
                lambda x, w, b: T.linear(x, w, b))
    if name == "attention":
        bias = np.array([[0.0, 0.0, -1e9], [0.0, 0.0, 0.0]])
        return [_leaf(r, 2, 3, 12)], lambda x: F.attention(x, 2, bias)
    if name == "softmax":
        return [_leaf(r, 3, 5)], lambda a: F.softmax(a, axis=0)
    if name == "log_softmax":
        return [_leaf(r, 3, 5)], F.log_softmax
    if name == "layer_norm":
        return ([_leaf(r, 2, 3, 6), _leaf(r, 6), _leaf(r, 6)],
                lambda x, g, b: F.layer_norm(x, g, b, eps=1e-6))
    if name == "gelu":
        return [_leaf(r, 4, 5)], F.gelu
    if name == "l2_normalize":
        return [_leaf(r, 3, 4)], F.l2_normalize
    if name == "cross_entropy":
        targets = np.array([1, -100, 4, 0])
        return [_leaf(r, 4, 5)], lambda a: F.cross_entropy(a, targets)
    if name == "mse_loss":
        target = r.standard_normal((3, 4))
        return [_leaf(r, 3, 4)], lambda a: F.mse_loss(a, target)
    raise KeyError(f"no finite-difference case for op {name!r}")


def op_names():
    return sorted(DIFFERENTIABLE_OPS)


def check_op(name, seed=0):
    rng = np.random.default_rng(seed)
    inputs, forward = _case(rng, name)
    weights = np.random.default_rng(seed + 1)
    out_shape = forward(*inputs).shape
    w = Tensor(weights.standard_normal(out_shape))

    def loss():
        return T.tsum(T.mul(forward(*inputs), w))

    return check_function(name, loss, inputs)


def run_op_checks(seed=0, names=None):
    return [check_op(n, seed) for n in (names or op_names())]
