"""Slow, obviously-correct reference implementations used only by the tests."""
from __future__ import annotations

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    """Direct cross-correlation of a (C,H,W) map."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = 0.0 if b is None else b[o]
                for c in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            s += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = s
    return out


def tconv_scatter(x, w, stride):
    """Every input pixel stamps its weighted kernel onto the output."""
    cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    out = np.zeros((cout, (h - 1) * stride + k, (wd - 1) * stride + k))
    for c in range(cin):
        for i in range(h):
            for j in range(wd):
                out[:, i * stride: i * stride + k, j * stride: j * stride + k] += x[c, i, j] * w[c]
    return out


def bilinear_tent(x, ho, wo):
    """Half-pixel bilinear as a tent kernel over clamped source coordinates."""
    h, w = x.shape[-2:]

    def weights(n_in, n_out):
        m = np.zeros((n_out, n_in))
        for i in range(n_out):
            src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
            for j in range(n_in):
                m[i, j] = max(0.0, 1.0 - abs(src - j))
        return m

    wh, ww = weights(h, ho), weights(w, wo)
    out = np.zeros(x.shape[:-2] + (ho, wo))
    for i in range(ho):
        for j in range(wo):
            acc = 0.0
            for p in range(h):
                for q in range(w):
                    acc = acc + wh[i, p] * ww[j, q] * x[..., p, q]
            out[..., i, j] = acc
    return out


def topk_sort(v, k):
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))
    return sorted(order[:k])


def boundary_scan(semseg):
    """Pixels with a 4-neighbour of a different class."""
    h, w = semseg.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < h and 0 <= b < w and semseg[a, b] != semseg[i, j]:
                    out[i, j] = 1
    return out


def dilate_loops(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for i in range(h):
        for j in range(w):
            out[i, j] = mask[max(0, i - r): i + r + 1, max(0, j - r): j + r + 1].any()
    return out


def rmse_two_pass(pred, label):
    n = 0
    total = 0.0
    for p, l in zip(np.ravel(pred), np.ravel(label)):
        total += (p - l) ** 2
        n += 1
    return (total / n) ** 0.5
