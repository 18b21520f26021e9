"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy array. Every differentiable op records its
parents and a closure mapping the output gradient to parent gradients; calling
:func:`backward` on a scalar walks the graph in reverse topological order and
accumulates into ``.grad`` of leaf tensors that require gradients.

``backward`` accumulates: calling it twice without zeroing doubles the
gradients. Callers (the trainer) zero gradients explicitly.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

from ..errors import ContractError, DimensionError

_node_ids = itertools.count()
_state = {"grad": True}
_corrupted = set()

# name -> op function; every entry must have a finite-difference case in gradcheck
DIFFERENTIABLE_OPS = {}


def register(name):
    def deco(fn):
        DIFFERENTIABLE_OPS[name] = fn
        fn.op_name = name
        return fn

    return deco


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


@contextlib.contextmanager
def corrupt_gradient(op_name, factor=1.5):
    """Test hook: scale the backward of ``op_name`` by ``factor``."""
    _corrupted.add((op_name, factor))
    try:
        yield
    finally:
        _corrupted.discard((op_name, factor))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward", "_op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(x, like):
    """Wrap a constant operand in the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, backward_fn, op):
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.node_id = next(_node_ids)
    out.name = None
    out._op = op
    if needs:
        out._parents = parents
        if _corrupted:
            for name, factor in _corrupted:
                if name == op:
                    inner = backward_fn

                    def backward_fn(g, _inner=inner, _f=factor):
                        return tuple(None if x is None else x * _f for x in _inner(g))

        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss, grad=None):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    owned = set()
    grads = {loss.node_id: np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True).reshape(node.shape)
            else:
                node.grad += g.reshape(node.shape)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.node_id)
            if prev is None:
                grads[p.node_id] = pg
            elif p.node_id in owned:
                prev += pg
            else:
                # first accumulation allocates; later ones reuse that buffer
                grads[p.node_id] = prev + pg
                owned.add(p.node_id)


# -- elementwise arithmetic ------------------------------------------------
@register("add")
def add(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = b if isinstance(b, Tensor) else _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw, "add")


@register("sub")
def sub(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = b if isinstance(b, Tensor) else _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


@register("mul")
def mul(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = b if isinstance(b, Tensor) else _lift(b, a)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


@register("div")
def div(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = b if isinstance(b, Tensor) else _lift(b, a)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


@register("power")
def power(x, exponent):
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _make(x.data ** exponent, (x,), bw, "power")


@register("exp")
def exp(x):
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


@register("log")
def log(x):
    def bw(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), bw, "log")


@register("clamp")
def clamp(x, lo=None, hi=None):
    """Clip into [lo, hi]; gradient is zero where the bound is active."""
    out = np.clip(x.data, lo, hi)

    def bw(g):
        inside = np.ones(x.shape, dtype=bool)
        if lo is not None:
            inside &= x.data >= lo
        if hi is not None:
            inside &= x.data <= hi
        return (g * inside,)

    return _make(out, (x,), bw, "clamp")


# -- reductions and shape ops ----------------------------------------------
@register("sum")
def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


@register("mean")
def mean(x, axis=None, keepdims=False):
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


@register("reshape")
def reshape(x, shape):
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


@register("transpose")
def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def swapaxes(x, a, b):
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


@register("getitem")
def getitem(x, index):
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index], copy=not basic) if not basic else x.data[index], (x,), bw, "getitem")


@register("concat")
def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                parts.append(None)
                continue
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


@register("embedding")
def embedding(weight, ids):
    """Rows of ``weight`` selected by integer array ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding id out of range [0, {weight.shape[0]}): got {ids.min()}..{ids.max()}")

    def bw(g):
        out = np.zeros_like(weight.data)
        flat = ids.reshape(-1)
        if flat.size:
            # sorted segment sums; np.add.at is an unbuffered scalar loop
            order = np.argsort(flat, kind="stable")
            rows, starts = np.unique(flat[order], return_index=True)
            out[rows] = np.add.reduceat(g.reshape(-1, weight.shape[-1])[order], starts, axis=0)
        return (out,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


# -- linear algebra --------------------------------------------------------
@register("matmul")
def matmul(a, b):
    """Batched matrix product; leading dimensions broadcast."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


@register("linear")
def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``, run as one 2-D GEMM."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    y = x2 @ weight.data
    if bias is not None:
        y += bias.data

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        # GEMV against ones beats a strided column reduction
        return gx, gw, (np.ones(len(g2), g2.dtype) @ g2 if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y.reshape(lead + (weight.shape[1],)), parents, bw, "linear")
