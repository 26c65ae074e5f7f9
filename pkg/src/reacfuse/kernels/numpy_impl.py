from __future__ import annotations

from collections import deque

import numpy as np
from scipy.special import erf

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def masked_softmax(x, mask):
    """Row softmax over the last axis where ``mask`` False means -inf.

    Returns ``(y, ok)``; ``ok`` is False if some row had no unmasked entry.
    """
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=-1).all():
        return np.zeros_like(x), False
    y = np.where(mask, x, -np.inf)
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return y, True


def softmax_backward(y, g):
    dot = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - dot)


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_backward(x, g):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def bfs_distances(n, indptr, indices, d_max, cross):
    """All-pairs unweighted shortest paths on a CSR graph.

    Distances above ``d_max`` are clipped; unreachable pairs get ``cross``.
    """
    out = np.full((n, n), cross, dtype=np.int64)
    for src in range(n):
        out[src, src] = 0
        seen = {src}
        queue = deque([(src, 0)])
        while queue:
            u, d = queue.popleft()
            for v in indices[indptr[u]:indptr[u + 1]]:
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    out[src, v] = min(d + 1, d_max)
                    queue.append((v, d + 1))
    return out


def mann_whitney_auc(scores, labels):
    """AUC as P(pos > neg) + 0.5 P(tie), via midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # midrank of each tie group, 1-based
    start = 0
    while start < s.size:
        stop = start
        while stop + 1 < s.size and s[stop + 1] == s[start]:
            stop += 1
        ranks[start:stop + 1] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    r_pos = ranks[labels[order]].sum()
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
