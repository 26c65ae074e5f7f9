"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: every op computes its numpy result eagerly and,
when gradients are being recorded, attaches a closure that pushes the
upstream gradient back into its parents. ``backward`` walks the recorded graph
in reverse topological order.

Precision is a process-wide policy: ``"fast-32"`` (float32, training) or
``"check-64"`` (float64, gradient checks). New float tensors adopt the active
policy; use :func:`precision` to switch temporarily.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from reacfuse import kernels
from reacfuse.kernels import AllMaskedRow

PRECISIONS = {"fast-32": np.float32, "check-64": np.float64}
_state = {"dtype": np.float32, "grad": True}


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _state["dtype"] = PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a backward graph."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class IndexOutOfVocab(IndexError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self, grad=None):
        backward(self, grad)


def tensor(data, requires_grad=False, name=None):
    return Tensor(np.array(data, dtype=_state["dtype"]), requires_grad=requires_grad, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the backward closure if needed."""
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def relu(a):
    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), bw)


def gelu(a):
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``.

    erf comes from ``math.erf`` (numba path) or ``scipy.special.erf``; both are
    accurate to double precision, well inside 1e-7.
    """
    a = _as_tensor(a)

    def bw(g):
        _accum(a, kernels.gelu_backward(a.data, g))

    return _make(kernels.gelu_forward(a.data), (a,), bw)


# -- shape / reduction -------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def getitem(a, idx):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def embedding(table, ids):
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexOutOfVocab(f"ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _make(table.data[ids], (table,), bw)


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is True by a constant; no gradient there."""
    mask = np.broadcast_to(mask, a.shape)

    def bw(g):
        _accum(a, np.where(mask, 0.0, g))

    return _make(np.where(mask, value, a.data).astype(a.data.dtype), (a,), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Layer normalisation over the last axis with learnable scale/shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _make(out, (x, gamma, beta), bw)


# -- softmax / attention -----------------------------------------------------

def softmax_rows(x, mask=None):
    """Max-subtracted softmax over the last axis.

    ``mask`` (bool, broadcastable) marks entries that participate; excluded
    entries behave as -inf and come out exactly 0. Entries of ``x`` that are
    already -inf are treated the same way. Raises :class:`AllMaskedRow` when a
    row has nothing left to normalise over.
    """
    x = _as_tensor(x)
    finite = np.isfinite(x.data)
    m = finite if mask is None else np.logical_and(np.broadcast_to(mask, x.shape), finite)
    y, ok = kernels.masked_softmax(x.data, m)
    if not ok:
        raise AllMaskedRow("softmax row has no unmasked entry")

    def bw(g):
        _accum(x, kernels.softmax_backward(y, g))

    return _make(y, (x,), bw)


def masked_biased_attention(q, k, v, bias=None, mask=None, return_weights=False):
    """Scaled dot-product attention with an additive bias and a boolean mask.

    Shapes are ``(..., heads, tokens, head_dim)`` for q/k/v; ``bias`` is
    ``(..., heads, n_q, n_k)``; ``mask`` broadcasts to the logits and
    ``mask[..., i, j]`` True means query i may attend to key j. Masked pairs
    get weight exactly 0.
    """
    hd = q.shape[-1]
    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    if bias is not None:
        logits = add(logits, bias)
    w = softmax_rows(logits, mask)
    out = matmul(w, v)
    return (out, w) if return_weights else out


# -- losses ------------------------------------------------------------------

BCE_EPS = 1e-7


def soft_target_bce(p, q, weights=None):
    """Mean binary cross-entropy of probabilities ``p`` against soft targets ``q``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; the clamp passes no gradient.
    With ``q`` in {0, 1} the value equals hard-label BCE bit-for-bit.
    """
    p = _as_tensor(p)
    q = np.asarray(q, dtype=p.data.dtype)
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    per = -(q * np.log(pc) + (1.0 - q) * np.log(1.0 - pc))
    w = None if weights is None else np.asarray(weights, dtype=p.data.dtype)
    if w is not None:
        per = per * w
    n = per.size
    inside = (p.data >= BCE_EPS) & (p.data <= 1.0 - BCE_EPS)

    def bw(g):
        dp = (-(q / pc) + (1.0 - q) / (1.0 - pc)) * inside
        if w is not None:
            dp = dp * w
        _accum(p, g * dp / n)

    return _make(np.asarray(per.mean(), dtype=p.data.dtype), (p,), bw)


def hard_bce(p, y):
    """Plain BCE for labels in {0, 1}; reference for the soft-target reduction."""
    pc = np.clip(np.asarray(p), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y)
    per = np.where(y == 1, -np.log(pc), -np.log(1.0 - pc))
    return per.mean()


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-softmax of ``logits`` (N, V) at ``targets`` (N,)."""
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.shape
    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    t = targets[keep]
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexOutOfVocab(f"target outside [0, {vocab})")
    x = logits.data[keep]
    mx = x.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True))
    logp = x - lse
    count = max(int(keep.sum()), 1)
    loss = -logp[np.arange(t.size), t].sum() / count

    def bw(g):
        probs = np.exp(logp)
        probs[np.arange(t.size), t] -= 1.0
        full = np.zeros_like(logits.data)
        full[keep] = probs * (g / count)
        _accum(logits, full)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# -- backward pass -----------------------------------------------------------

def backward(loss, grad=None, params=()):
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Tensors in ``params`` that the graph does not reach get a zero gradient.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # intermediate results: release graph and gradient buffers
                node._backward = None
                node._parents = ()
                node.grad = None if node is not loss else node.grad


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction; a missing gradient counts as zero."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        s = self.state
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        for p, m, v in zip(self.params, s.m, s.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            update = (s.lr / c1) * m / (np.sqrt(v / c2) + s.eps)
            p.data -= update.astype(p.data.dtype)


def adam_step(params, grads, state: AdamState):
    """Functional Adam update; returns new parameter arrays and mutates ``state``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        out.append(p - (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps))
    return out, state
