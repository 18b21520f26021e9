"""AdamW with decoupled weight decay."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.98, eps=1e-8,
               weight_decay=0.01, decay=None):
    """One in-place AdamW update.

    ``params`` and ``grads`` map names to arrays; names with a ``None`` grad are
    skipped entirely (no decay, no moment update). ``decay`` optionally limits
    weight decay to a set of names. Moment buffers are created lazily, so
    parameters that never receive a gradient never get optimizer state.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"adamw: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"adamw: state shape {m.shape} != param shape {p.shape} for {name}")
        v = state.v[name]
        if weight_decay and (decay is None or name in decay):
            p *= 1.0 - lr * weight_decay
        # one scratch buffer instead of a temporary per operation
        buf = np.multiply(g, 1.0 - beta1, out=np.empty_like(p))
        m *= beta1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - beta2
        v *= beta2
        v += buf
        np.sqrt(v, out=buf)
        buf *= 1.0 / np.sqrt(bc2)
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= lr / bc1
        p -= buf
    return params, state


class AdamW:
    """Optimizer over a name -> Tensor mapping.

    Only names in ``trainable`` are updated; weight decay applies to matrices
    (ndim >= 2) and skips biases, norms and scalars.
    """

    def __init__(self, params, trainable=None, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.trainable = list(params) if trainable is None else [n for n in params if n in set(trainable)]
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = {n for n in self.trainable if params[n].ndim >= 2}
        self.state = AdamWState()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self, lr):
        arrays = {n: self.params[n].data for n in self.trainable}
        grads = {n: self.params[n].grad for n in self.trainable}
        adamw_step(arrays, grads, self.state, lr, self.betas[0], self.betas[1], self.eps,
                   self.weight_decay, self.decay)
