"""Naive loop implementations used as reference values.

Deliberately written element by element, sharing no code with the package.
"""
import math

import numpy as np


def conv2d(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    (sh, sw), (ph, pw) = stride, padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for a in range(kh):
                            for e in range(kw):
                                r, q = i * sh + a - ph, j * sw + e - pw
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[s, c, r, q] * w[o, c, a, e]
                    out[s, o, i, j] = acc
    return out


def depthwise_conv2d(x, w, b, stride, padding):
    """Output channel ``o`` reads input channel ``o // multiplier``."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    mult = cout // cin
    (sh, sw), (ph, pw) = stride, padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            c = o // mult
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for a in range(kh):
                        for e in range(kw):
                            r, q = i * sh + a - ph, j * sw + e - pw
                            if 0 <= r < h and 0 <= q < wd:
                                acc += x[s, c, r, q] * w[o, 0, a, e]
                    out[s, o, i, j] = acc
    return out


def conv_transpose2d(x, w, b, stride, padding):
    """Scatter form: every input pixel stamps the kernel at stride offsets."""
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    (sh, sw), (ph, pw) = stride, padding
    ho = (h - 1) * sh + kh - 2 * ph
    wo = (wd - 1) * sw + kw - 2 * pw
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            out[s, o] += b[o]
        for c in range(cin):
            for i in range(h):
                for j in range(wd):
                    for o in range(cout):
                        for a in range(kh):
                            for e in range(kw):
                                r, q = i * sh + a - ph, j * sw + e - pw
                                if 0 <= r < ho and 0 <= q < wo:
                                    out[s, o, r, q] += x[s, c, i, j] * w[c, o, a, e]
    return out


def mse(pred, target):
    pred, target = np.ravel(pred), np.ravel(target)
    total = 0.0
    for p, t in zip(pred, target):
        total += (p - t) ** 2
    return total / len(pred)


def rmse(pred, target):
    total = 0.0
    for (px, py), (tx, ty) in zip(pred, target):
        total += (px - tx) ** 2 + (py - ty) ** 2
    return math.sqrt(total / len(pred))


def attention_one_head(x, wq, bq, wk, bk, wv, bv, wo, bo):
    """Single-head scaled dot-product self-attention on ``x[L, D]``."""
    length, d = x.shape
    q = [[bq[j] + sum(x[t, i] * wq[i, j] for i in range(d)) for j in range(d)] for t in range(length)]
    k = [[bk[j] + sum(x[t, i] * wk[i, j] for i in range(d)) for j in range(d)] for t in range(length)]
    v = [[bv[j] + sum(x[t, i] * wv[i, j] for i in range(d)) for j in range(d)] for t in range(length)]
    out = np.zeros((length, d))
    for t in range(length):
        scores = [sum(q[t][j] * k[u][j] for j in range(d)) / math.sqrt(d) for u in range(length)]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        z = sum(ex)
        ctx = [sum(ex[u] / z * v[u][j] for u in range(length)) for j in range(d)]
        for j in range(d):
            out[t, j] = bo[j] + sum(ctx[i] * wo[i, j] for i in range(d))
    return out


def finite_diff(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
