"""Minimal NHWC layers with hand-written backward passes."""

import numpy as np
from scipy.special import expit


def conv2d(x, w, b, stride=1):
    """'Same'-padded convolution; ``x`` is (B, H, W, Cin), ``w`` is (k, k, Cin, Cout)."""
    k = w.shape[0]
    pad = k // 2
    bsz, h, wd, cin = x.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, cin), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + wd] = x
    else:
        xp = x
    cols = np.empty((bsz, ho, wo, k, k, cin), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(bsz * ho * wo, k * k * cin)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(bsz, ho, wo, -1), (cols, x.shape, w, stride)


def conv2d_backward(dout, cache, need_dx=True):
    cols, xshape, w, stride = cache
    k, _, cin, cout = w.shape
    pad = k // 2
    bsz, h, wd, _ = xshape
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(bsz, ho, wo, k, k, cin)
    dxp = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, cin), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
    return dxp[:, pad:pad + h, pad:pad + wd], dw, db


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(d):
    b, h, w, c = d.shape
    return d.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(z):
    return expit(z)
