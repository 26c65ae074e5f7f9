from __future__ import annotations

import math

import numpy as np
from numba import njit

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@njit(cache=True)
def _softmax_rows(x, m, y):
    rows, n = x.shape
    for r in range(rows):
        mx = -np.inf
        for j in range(n):
            if m[r, j] and x[r, j] > mx:
                mx = x[r, j]
        if mx == -np.inf:
            return False
        s = 0.0
        for j in range(n):
            if m[r, j]:
                e = math.exp(x[r, j] - mx)
                y[r, j] = e
                s += e
            else:
                y[r, j] = 0.0
        for j in range(n):
            y[r, j] /= s
    return True


def masked_softmax(x, mask):
    n = x.shape[-1]
    x2 = np.ascontiguousarray(x).reshape(-1, n)
    m2 = np.ascontiguousarray(np.broadcast_to(mask, x.shape)).reshape(-1, n)
    y = np.empty_like(x2)
    ok = _softmax_rows(x2, m2, y)
    return y.reshape(x.shape), bool(ok)


@njit(cache=True)
def _softmax_bwd_rows(y, g, out):
    rows, n = y.shape
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * y[r, j]
        for j in range(n):
            out[r, j] = y[r, j] * (g[r, j] - dot)


def softmax_backward(y, g):
    n = y.shape[-1]
    y2 = np.ascontiguousarray(y).reshape(-1, n)
    g2 = np.ascontiguousarray(g, dtype=y.dtype).reshape(-1, n)
    out = np.empty_like(y2)
    _softmax_bwd_rows(y2, g2, out)
    return out.reshape(y.shape)


@njit(cache=True)
def _gelu_fwd(x, out):
    for i in range(x.size):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))


@njit(cache=True)
def _gelu_bwd(x, g, out):
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
        out[i] = g[i] * (cdf + v * pdf)


def gelu_forward(x):
    flat = np.ascontiguousarray(x).ravel()
    out = np.empty_like(flat)
    _gelu_fwd(flat, out)
    return out.reshape(np.shape(x))


def gelu_backward(x, g):
    flat = np.ascontiguousarray(x).ravel()
    gf = np.ascontiguousarray(g, dtype=flat.dtype).ravel()
    out = np.empty_like(flat)
    _gelu_bwd(flat, gf, out)
    return out.reshape(np.shape(x))


@njit(cache=True)
def _bfs(n, indptr, indices, d_max, cross, out):
    queue = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.int64)
    for src in range(n):
        for k in range(n):
            dist[k] = -1
        dist[src] = 0
        head = 0
        tail = 1
        queue[0] = src
        while head < tail:
            u = queue[head]
            head += 1
            for p in range(indptr[u], indptr[u + 1]):
                v = indices[p]
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue[tail] = v
                    tail += 1
        for k in range(n):
            if dist[k] < 0:
                out[src, k] = cross
            elif dist[k] > d_max:
                out[src, k] = d_max
            else:
                out[src, k] = dist[k]


def bfs_distances(n, indptr, indices, d_max, cross):
    out = np.empty((n, n), dtype=np.int64)
    _bfs(n, np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64),
         d_max, cross, out)
    return out


@njit(cache=True)
def _auc(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    n = scores.size
    n_pos = 0
    for i in range(n):
        if labels[i]:
            n_pos += 1
    n_neg = n - n_pos
    r_pos = 0.0
    start = 0
    while start < n:
        stop = start
        while stop + 1 < n and scores[order[stop + 1]] == scores[order[start]]:
            stop += 1
        rank = 0.5 * (start + stop) + 1.0
        for k in range(start, stop + 1):
            if labels[order[k]]:
                r_pos += rank
        start = stop + 1
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def mann_whitney_auc(scores, labels):
    return float(_auc(np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(np.bool_)))
