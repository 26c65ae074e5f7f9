"""Parameter containers and the transformer building blocks."""

from __future__ import annotations

import hashlib

import numpy as np

from reacfuse import tensor as T
from reacfuse.tensor import Tensor


def param(data, name=None):
    return Tensor(np.asarray(data, dtype=T.get_dtype()), requires_grad=True, name=name)


class Module:
    """Tiny parameter tree: attributes that are Tensors, Modules or lists of Modules."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def n_params(self):
        return int(sum(p.data.size for p in self.parameters()))

    def checksum(self):
        """sha256 over parameter names, shapes and raw bytes (stable order)."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            h.update(name.encode())
            h.update(str(p.data.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, std=0.02, zero=False):
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d, d_ff, rng):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x, n_heads):
    """(B, n, d) -> (B, H, n, d/H)."""
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    """(B, H, n, hd) -> (B, n, H*hd)."""
    b, h, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


class MultiHeadAttention(Module):
    def __init__(self, d, n_heads, rng):
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def heads(self, x, proj):
        return split_heads(proj(x), self.n_heads)

    def __call__(self, x, bias=None, mask=None, return_weights=False):
        q = self.heads(x, self.wq)
        k = self.heads(x, self.wk)
        v = self.heads(x, self.wv)
        out = T.masked_biased_attention(q, k, v, bias, mask, return_weights=return_weights)
        if return_weights:
            out, w = out
            return self.wo(merge_heads(out)), w
        return self.wo(merge_heads(out))


class TransformerLayer(Module):
    """Pre-norm block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, d, n_heads, rng, d_ff=None):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff or 4 * d, rng)

    def __call__(self, x, bias=None, mask=None, record=None):
        if record is not None:
            a, w = self.attn(self.ln1(x), bias, mask, return_weights=True)
            record.append(w)
        else:
            a = self.attn(self.ln1(x), bias, mask)
        h = x + a
        return h + self.ffn(self.ln2(h))
