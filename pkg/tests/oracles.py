"""Slow, obviously-correct reference implementations used only by the tests."""

import math
from fractions import Fraction

import numpy as np


def matmul_loops(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i, j] = s
    return out


def jacobi_eigvals(sym, tol=1e-14, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by classical two-sided Jacobi rotations."""
    a = np.array(sym, dtype=float)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = 0.5 * math.atan2(2 * a[p, q], a[q, q] - a[p, p])
                c, s = math.cos(theta), math.sin(theta)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


def exact_rank(rows):
    """Rank of an integer/rational matrix by fraction-exact row reduction."""
    m = [[Fraction(x) for x in row] for row in rows]
    rank, ncols = 0, len(m[0])
    for col in range(ncols):
        pivot = next((r for r in range(rank, len(m)) if m[r][col] != 0), None)
        if pivot is None:
            continue
        m[rank], m[pivot] = m[pivot], m[rank]
        for r in range(len(m)):
            if r != rank and m[r][col] != 0:
                f = m[r][col] / m[rank][col]
                m[r] = [x - f * y for x, y in zip(m[r], m[rank])]
        rank += 1
    return rank


def softmax_attention_loops(q, k, v):
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        scores = [math.exp(sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d)) for j in range(n)]
        z = sum(scores)
        for j in range(n):
            out[i] += scores[j] / z * v[j]
    return out


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [x / s for x in e]


def elu1_scalar(x):
    return x + 1.0 if x > 0 else math.exp(x)


def kv_buffer_outer(kk, v, alpha):
    d = kk.shape[1]
    buf = np.zeros((d, v.shape[1]))
    ksum = np.zeros((1, d))
    for j in range(kk.shape[0]):
        buf += alpha[j] * np.outer(kk[j], v[j])
        ksum[0] += alpha[j] * kk[j]
    return buf, ksum


def depthwise_conv_loops(img, w):
    """``img`` (H, W, C), ``w`` (3, 3, C), zero padding 1."""
    h, wd, c = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(wd):
            for ch in range(c):
                s = 0.0
                for i in range(3):
                    for j in range(3):
                        yy, xx = y + i - 1, x + j - 1
                        if 0 <= yy < h and 0 <= xx < wd:
                            s += w[i, j, ch] * img[yy, xx, ch]
                out[y, x, ch] = s
    return out


def conv_s2_loops(img, w):
    """``img`` (H, W, Cin), ``w`` (3, 3, Cin, Cout), stride 2, zero padding 1."""
    h, wd, cin = img.shape
    cout = w.shape[3]
    out = np.zeros((h // 2, wd // 2, cout))
    for y in range(h // 2):
        for x in range(wd // 2):
            for co in range(cout):
                s = 0.0
                for i in range(3):
                    for j in range(3):
                        yy, xx = 2 * y + i - 1, 2 * x + j - 1
                        if 0 <= yy < h and 0 <= xx < wd:
                            s += float(np.dot(w[i, j, :, co], img[yy, xx, :]))
                out[y, x, co] = s
    return out


def efficient_attention_direct(q, k, v):
    rq = np.array([softmax_list(list(row)) for row in q])
    rk = np.array([softmax_list(list(col)) for col in k.T]).T
    return rq @ (rk.T @ v)
