"""Neural-network primitives built on the row kernels."""
import numpy as np

from ..errors import ContractError, NonFiniteError, TargetIndexError
from . import kernels
from .tensor import Tensor, _make, register

IGNORE_INDEX = -100


def _move_last(x, axis):
    axis = axis % x.ndim
    return axis, axis != x.ndim - 1


@register("softmax")
def softmax(x, axis=-1):
    """Max-subtracted softmax; raises on non-finite input."""
    axis, moved = _move_last(x, axis)
    data = np.moveaxis(x.data, axis, -1) if moved else x.data
    y, finite = kernels.softmax_forward(data)
    if not finite:
        raise NonFiniteError("softmax received non-finite input")

    def bw(g):
        gl = np.moveaxis(g, axis, -1) if moved else g
        gx = kernels.softmax_backward(y, gl)
        return (np.moveaxis(gx, -1, axis) if moved else gx,)

    return _make(np.moveaxis(y, -1, axis) if moved else y, (x,), bw, "softmax")


@register("attention")
def attention(qkv, heads, key_bias=None):
    """Scaled dot-product multi-head attention from packed projections.

    ``qkv`` is (B, T, 3D) holding queries, keys and values side by side;
    ``key_bias`` is an optional constant additive (B, T) mask over keys.
    Returns the (B, T, D) context before the output projection.
    """
    b, t, d3 = qkv.shape
    d = d3 // 3
    if d3 != 3 * d or d % heads:
        raise ContractError(f"packed projections of width {d3} cannot split into 3 x {heads} heads")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    # (3, B, H, T, dh)
    x = qkv.data.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = x[0], x[1], x[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * np.asarray(scale, dtype=qkv.dtype)
    if key_bias is not None:
        scores += np.asarray(key_bias, dtype=qkv.dtype)[:, None, None, :]
    p, finite = kernels.softmax_forward(scores)
    if not finite:
        raise NonFiniteError("attention received non-finite scores")
    ctx = p @ v

    def bw(g):
        gh = g.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
        gp = gh @ v.transpose(0, 1, 3, 2)
        gs = kernels.softmax_backward(p, gp)
        gs *= np.asarray(scale, dtype=gs.dtype)
        out = np.empty((b, t, 3, heads, dh), dtype=qkv.dtype)
        view = out.transpose(2, 0, 3, 1, 4)
        np.matmul(gs, k, out=view[0])
        np.matmul(gs.transpose(0, 1, 3, 2), q, out=view[1])
        np.matmul(p.transpose(0, 1, 3, 2), gh, out=view[2])
        return (out.reshape(b, t, d3),)

    return _make(ctx.transpose(0, 2, 1, 3).reshape(b, t, d), (qkv,), bw, "attention")


@register("log_softmax")
def log_softmax(x):
    """Log-softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


@register("layer_norm")
def layer_norm(x, gamma, beta, eps=1e-6):
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    y, xhat, rstd = kernels.layer_norm_forward(x.data, gamma.data, beta.data, eps)

    def bw(g):
        gx, ggamma, gbeta = kernels.layer_norm_backward(g, xhat, rstd, gamma.data)
        return gx, ggamma, gbeta

    return _make(y, (x, gamma, beta), bw, "layer_norm")


@register("gelu")
def gelu(x):
    """Exact erf GELU."""
    def bw(g):
        return (kernels.gelu_backward(x.data, g),)

    return _make(kernels.gelu_forward(x.data), (x,), bw, "gelu")


@register("l2_normalize")
def l2_normalize(x, eps=1e-12):
    """Scale each row (last axis) to unit Euclidean norm; rows below ``eps`` map to ~0."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom

    def bw(g):
        active = norm > eps
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / denom),)

    return _make(y, (x,), bw, "l2_normalize")


@register("cross_entropy")
def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """Mean negative log-likelihood of integer ``targets`` under row softmax.

    Rows whose target equals ``ignore_index`` are excluded from the mean. When
    every row is ignored the loss is a constant zero.
    """
    targets = np.asarray(targets).reshape(-1)
    n, k = logits.shape
    if targets.shape[0] != n:
        raise ContractError(f"cross_entropy: {n} logits rows but {targets.shape[0]} targets")
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= k))
    if bad.any():
        raise TargetIndexError(f"cross_entropy target {targets[bad][0]} outside [0, {k})")
    count = int(valid.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    rows = np.nonzero(valid)[0]
    tgt = targets[rows]
    probs, finite = kernels.softmax_forward(logits.data)
    if not finite:
        raise NonFiniteError("cross_entropy received non-finite logits")
    shifted = logits.data[rows] - logits.data[rows].max(axis=1, keepdims=True)
    logp = shifted[np.arange(count), tgt] - np.log(np.exp(shifted).sum(axis=1))
    loss = np.asarray(-logp.mean(), dtype=logits.dtype)

    def bw(g):
        grad = np.zeros_like(logits.data)
        grad[rows] = probs[rows]
        grad[rows, tgt] -= 1.0
        return (grad * (g / count),)

    return _make(loss, (logits,), bw, "cross_entropy")


@register("mse_loss")
def mse_loss(pred, target):
    """Mean squared error against a constant target."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    diff = pred.data - target
    loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bw(g):
        return (g * 2.0 * diff / diff.size,)

    return _make(loss, (pred,), bw, "mse_loss")
