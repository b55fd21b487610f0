"""Forward/backward kernels for the fixed layer set, on NHWC tensors.

Every ``*_forward`` returns ``(out, cache)`` and never mutates its inputs;
the matching ``*_backward`` consumes the cache and returns input and
parameter gradients.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


def relu(x):
    return np.maximum(x, 0)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(x, w, b=None, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (N, H, W, Cin) with ``w`` (k, k, Cin, Cout), zero padding."""
    n, h, wd, c = x.shape
    k, k2, cin, cout = w.shape
    if k != k2 or cin != c:
        raise ValueError(f"kernel {w.shape} incompatible with input {x.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{wd} too small for kernel {k} with padding {padding}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    out = cols.reshape(-1, k * k * c) @ w.reshape(k * k * c, cout)
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, cout), (x.shape, cols, w, b is not None, stride, padding)


def conv2d_backward(dout, cache, need_dx: bool = True):
    x_shape, cols, w, has_bias, stride, padding = cache
    n, h, wd, c = x_shape
    k, _, _, cout = w.shape
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, k * k * c).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0) if has_bias else None
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(k * k * c, cout).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, padding:padding + h, padding:padding + wd, :] if padding else dxp
    return dx, dw, db


def _channel_axes(x):
    return tuple(range(x.ndim - 1))


def batchnorm_forward_train(x, gamma, beta, eps: float):
    """Normalize with batch statistics; returns ``(out, cache, batch_mean, batch_var)``."""
    axes = _channel_axes(x)
    count = int(np.prod([x.shape[a] for a in axes]))
    if x.shape[0] < 2:
        raise ValueError("batch norm in train mode needs a batch of at least 2 samples")
    mean = x.mean(axis=axes)
    xc = x - mean
    var = (xc * xc).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, count), mean, var


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, count = cache
    axes = _channel_axes(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    dx = (inv_std / count) * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def batchnorm_forward_infer(x, gamma, beta, running_mean, running_var, eps: float):
    return gamma * ((x - running_mean) / np.sqrt(running_var + eps)) + beta


def maxpool_forward(x, size: int, stride: int):
    n, h, w, c = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for {size}x{size} pooling")
    views = [x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
             for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    return out, (x, out, size, stride)


def maxpool_backward(dout, cache):
    x, out, size, stride = cache
    _, ho, wo, _ = out.shape
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    # First maximal element in window scan order receives the gradient.
    for i in range(size):
        for j in range(size):
            sl = (slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
            hit = (x[sl] == out) & ~taken
            dx[sl] += dout * hit
            taken |= hit
    return dx


def globalavgpool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def globalavgpool_backward(dout, shape):
    n, h, w, c = shape
    return np.broadcast_to((dout / (h * w))[:, None, None, :], shape).copy()


def dense_forward(x, w, b=None):
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def dense_backward(dout, cache):
    x, w, has_bias = cache
    return dout @ w.T, x.T @ dout, (dout.sum(axis=0) if has_bias else None)


def softmax(logits):
    logits = np.asarray(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels) -> float:
    """Mean of ``-log p[label]`` with probabilities floored at 1e-12."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError(f"shape mismatch: probs {probs.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError("label outside [0, num_classes)")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())
