"""Compiled float32 loop bodies behind the static kernels.

Reductions run strictly in index order with a float32 accumulator, so a
matmul equals the textbook triple loop bit for bit. No fast-math: the
compiler may not reassociate or contract these sums.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def matmul_into(a, b, out, relu):
    m, k = a.shape
    n = b.shape[1]
    row = np.empty(n, dtype=np.float32)
    for i in range(m):
        row[:] = 0.0
        # p-outer keeps each row[j] a sequential sum over p while letting j vectorize
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                row[j] += aip * b[p, j]
        for j in range(n):
            v = row[j]
            out[i, j] = 0.0 if relu and v < 0.0 else v


@njit(cache=True)
def layernorm_into(x, gamma, beta, eps, out):
    rows, d = x.shape
    width = np.float32(d)
    eps = np.float32(eps)
    centered = np.empty(d, dtype=np.float32)
    for i in range(rows):
        total = np.float32(0.0)
        for j in range(d):
            total += x[i, j]
        mean = total / width
        sq = np.float32(0.0)
        for j in range(d):
            c = x[i, j] - mean
            centered[j] = c
            sq += c * c
        inv = np.float32(1.0) / np.sqrt(sq / width + eps)
        for j in range(d):
            out[i, j] = centered[j] * inv * gamma[j] + beta[j]


@njit(cache=True)
def attention_into(q, keys, values, n_cached, k_cur, v_cur, has_cur, scale, out):
    """Single-query attention; ``q``, ``k_cur``, ``v_cur`` and ``out`` are flat."""
    n_heads, head_dim = keys.shape[1], keys.shape[2]
    scale = np.float32(scale)
    length = n_cached + (1 if has_cur else 0)
    scores = np.empty(length, dtype=np.float32)
    for h in range(n_heads):
        base = h * head_dim
        for pos in range(length):
            acc = np.float32(0.0)
            if pos < n_cached:
                for d in range(head_dim):
                    acc += q[base + d] * keys[pos, h, d]
            else:
                for d in range(head_dim):
                    acc += q[base + d] * k_cur[base + d]
            scores[pos] = acc * scale
        top = scores[0]
        for pos in range(1, length):
            if scores[pos] > top:
                top = scores[pos]
        total = np.float32(0.0)
        for pos in range(length):
            w = np.exp(scores[pos] - top)
            scores[pos] = w
            total += w
        mixed = np.zeros(head_dim, dtype=np.float32)
        for pos in range(n_cached):
            w = scores[pos]
            for d in range(head_dim):
                mixed[d] += w * values[pos, h, d]
        if has_cur:
            w = scores[n_cached]
            for d in range(head_dim):
                mixed[d] += w * v_cur[base + d]
        for d in range(head_dim):
            out[base + d] = mixed[d] / total
