"""Brute-force reference implementations used as independent test oracles.

Nothing here calls into squeezekit's numeric kernels; every routine is a
direct loop over the definition.
"""
import math

import mpmath
import numpy as np


def conv2d_loops(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    f, c, kh, kw = w.shape
    assert c == c_in
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((f, ho, wo), dtype=np.float64)
    for fi in range(f):
        for y in range(ho):
            for xx in range(wo):
                acc = float(b[fi]) if b is not None else 0.0
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            r = y * stride + i - pad
                            q = xx * stride + j - pad
                            if 0 <= r < h and 0 <= q < wd:
                                acc += float(x[ci, r, q]) * float(w[fi, ci, i, j])
                out[fi, y, xx] = acc
    return out


def maxpool_scan(x, k, stride):
    """(output, argmax routing) by scanning each window in row-major order."""
    c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.empty((c, ho, wo), dtype=np.float64)
    where = {}
    for ci in range(c):
        for y in range(ho):
            for xx in range(wo):
                best, pos = -math.inf, None
                for i in range(k):
                    for j in range(k):
                        v = x[ci, y * stride + i, xx * stride + j]
                        if v > best:
                            best, pos = v, (ci, y * stride + i, xx * stride + j)
                out[ci, y, xx] = best
                where[(ci, y, xx)] = pos
    return out, where


def maxpool_backward_scan(g, x, k, stride):
    _, where = maxpool_scan(x, k, stride)
    gx = np.zeros(x.shape, dtype=np.float64)
    for key, pos in where.items():
        gx[pos] += g[key]
    return gx


def count_by_enumeration(graph):
    """Walk every filter of every conv and count its scalars one at a time."""
    weights = biases = 0
    for node in graph.nodes:
        if node.op != "conv":
            continue
        for _filter in range(node.filters):
            for _c in range(node.in_channels):
                for _i in range(node.kernel):
                    for _j in range(node.kernel):
                        weights += 1
            biases += 1
    return weights, biases


def prune_by_sort(w, density):
    n = len(w)
    keep = math.ceil(round(density * n, 9))
    ranked = sorted(range(n), key=lambda i: (-abs(float(w[i])), i))
    return set(ranked[:keep])


def softmax_ce_mp(logits, label, dps=50):
    with mpmath.workdps(dps):
        z = [mpmath.mpf(float(v)) for v in logits]
        lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in z))
        return float(lse - z[label])


def kmeans_random_init(values, k, seed, iters=100):
    """Plain Lloyd's algorithm from centroids drawn at random from the data."""
    rng = np.random.default_rng(seed)
    v = np.asarray(values, dtype=np.float64)
    cent = rng.choice(v, size=k, replace=len(v) < k).astype(np.float64)
    for _ in range(iters):
        assign = np.array([int(np.argmin(np.abs(cent - x))) for x in v])
        new = cent.copy()
        for j in range(k):
            members = v[assign == j]
            if len(members):
                new[j] = members.mean()
        if np.array_equal(new, cent):
            break
        cent = new
    assign = np.array([int(np.argmin(np.abs(cent - x))) for x in v])
    return float(np.mean((v - cent[assign]) ** 2))


def squeezenet_params_closed_form(base_e=128, incr_e=128, freq=2, pct=0.5, sr=0.125,
                                  stem=(96, 7), classes=1000, in_ch=3, n=8):
    """Sum of (in*out*k*k + out) over the reference layer list, written out by hand."""
    filters, k = stem
    total = in_ch * filters * k * k + filters
    c = filters
    for i in range(n):
        e = base_e + incr_e * (i // freq)
        e3 = math.floor(e * pct + 0.5 + 1e-9)
        e1 = e - e3
        s = max(1, math.floor(sr * e + 0.5 + 1e-9))
        total += c * s + s
        total += s * e1 + e1
        total += s * 9 * e3 + e3
        c = e
    total += c * classes + classes
    return total
