"""Forward/backward primitives in float64 numpy (NCHW layout)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 (odd k) convolution, stride 1, zero 'same' padding.

    Returns the output and a cache for :func:`conv2d_same_backward`.
    """
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,H,W,k,k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)
    out = cols @ w.reshape(F, -1).T + b
    out = out.reshape(B, H, W, F).transpose(0, 3, 1, 2)
    return out, (x.shape, cols, w)


def conv2d_same_backward(dout: np.ndarray, cache):
    (B, C, H, W), cols, w = cache
    F, _, k, _ = w.shape
    p = k // 2
    d = dout.transpose(0, 2, 3, 1).reshape(B * H * W, F)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(F, -1)).reshape(B, H, W, C, k, k)
    dxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + H, j : j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + H, p : p + W], dw, db


def avgpool2(x: np.ndarray):
    """2x2 average pooling; an odd trailing row/column is dropped."""
    B, C, H, W = x.shape
    h, w = H // 2, W // 2
    out = x[:, :, : 2 * h, : 2 * w].reshape(B, C, h, 2, w, 2).mean(axis=(3, 5))
    return out, x.shape


def avgpool2_backward(dout: np.ndarray, shape):
    B, C, H, W = shape
    h, w = dout.shape[2], dout.shape[3]
    dx = np.zeros(shape)
    dx[:, :, : 2 * h, : 2 * w] = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
    return dx


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy on logits and its gradient w.r.t. the logits.

    The gradient sigmoid(z) - y is evaluated as -y*sigmoid(-z) + (1-y)*sigmoid(z)
    so its sign survives when the sigmoid saturates to exactly 0 or 1.
    """
    loss = np.logaddexp(0.0, z) - y * z
    dz = (1.0 - y) * sigmoid(z) - y * sigmoid(-z)
    return loss.mean(), dz / z.size


def maxpool2(x: np.ndarray):
    """2x2 max pooling; an odd trailing row/column is dropped."""
    B, C, H, W = x.shape
    h, w = H // 2, W // 2
    blocks = x[:, :, : 2 * h, : 2 * w].reshape(B, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h, w, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout: np.ndarray, cache):
    shape, idx = cache
    B, C, H, W = shape
    h, w = dout.shape[2], dout.shape[3]
    blocks = np.zeros((B, C, h, w, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[:, :, : 2 * h, : 2 * w] = blocks.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)
    return dx


ACTIVATIONS = {
    # name: (forward, derivative expressed through input and output)
    "tanh": (np.tanh, lambda pre, out: 1.0 - out**2),
    "relu": (lambda z: np.maximum(z, 0.0), lambda pre, out: (pre > 0).astype(np.float64)),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda pre, out: sigmoid(pre)),
}

POOLS = {
    "avg": (avgpool2, avgpool2_backward),
    "max": (maxpool2, maxpool2_backward),
}
