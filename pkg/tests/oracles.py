"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or the standard library so it
shares no arithmetic with the vectorized package code.
"""

from __future__ import annotations

import colorsys
import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Direct nested-loop cross-correlation, NHWC input, (kh, kw, cin, cout) kernel."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin), dtype=np.float64)
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout), dtype=np.float64)
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                for co in range(cout):
                    s = 0.0
                    for dy in range(kh):
                        for dx in range(kw):
                            for ci in range(cin):
                                s += xp[i, y * stride + dy, xx * stride + dx, ci] * w[dy, dx, ci, co]
                    out[i, y, xx, co] = s + (b[co] if b is not None else 0.0)
    return out


def sgd_momentum_scalar(w, grads, lr, momentum):
    """Per-coordinate scalar recurrence; returns the weight trajectory."""
    w = [float(v) for v in w]
    vel = [0.0] * len(w)
    traj = []
    for g in grads:
        for j in range(len(w)):
            vel[j] = momentum * vel[j] - lr * float(g[j])
            w[j] = w[j] + vel[j]
        traj.append(list(w))
    return traj


def adam_scalar(w, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    w = [float(v) for v in w]
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    traj = []
    for t, g in enumerate(grads, 1):
        for j in range(len(w)):
            gj = float(g[j])
            m[j] = beta1 * m[j] + (1 - beta1) * gj
            v[j] = beta2 * v[j] + (1 - beta2) * gj * gj
            mh = m[j] / (1 - beta1 ** t)
            vh = v[j] / (1 - beta2 ** t)
            w[j] = w[j] - lr * mh / (math.sqrt(vh) + eps)
        traj.append(list(w))
    return traj


def euclidean_fsum(f, g) -> float:
    return math.sqrt(math.fsum((float(a) - float(b)) ** 2 for a, b in zip(f, g)))


def knn_linear_scan(data, query, k):
    """Sorted linear scan with exact-sum distances; ties by ascending row."""
    dists = [(euclidean_fsum(row, query), i) for i, row in enumerate(data)]
    dists.sort()
    return dists[:k]


def hsl_shift_colorsys(rgb, dh, ds, dl):
    """Per pixel via colorsys (which orders the channels H, L, S)."""
    out = np.empty_like(rgb, dtype=np.float64)
    for idx in np.ndindex(rgb.shape[:-1]):
        h, l, s = colorsys.rgb_to_hls(*map(float, rgb[idx]))
        h = ((h * 360.0 + dh) % 360.0) / 360.0
        s = min(max(s + ds, 0.0), 1.0)
        l = min(max(l + dl, 0.0), 1.0)
        out[idx] = colorsys.hls_to_rgb(h, l, s)
    return out


def bilinear_point(img, y, x):
    """Clamped bilinear sample of a 2-D array at one point."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def softmax_direct(z):
    e = [math.exp(v) for v in z]
    s = sum(e)
    return [v / s for v in e]


def numeric_gradient(f, array, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Max of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
