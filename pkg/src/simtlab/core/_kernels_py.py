"""Pure numpy implementations of the compiled kernels (fallback backend)."""
import numpy as np


def masked_softmax(x, mask):
    neg = np.where(mask, x, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    s = e.sum(axis=1, keepdims=True)
    s = np.where(s > 0, s, 1.0)
    return (e / s).astype(x.dtype, copy=False)


def masked_softmax_backward(p, dp):
    dot = (p * dp).sum(axis=1, keepdims=True)
    return p * (dp - dot)


def layer_norm_forward(x, gain, shift, eps):
    mean = x.mean(axis=1, keepdims=True)
    diff = x - mean
    var = (diff * diff).mean(axis=1)
    floored = var < eps
    var = np.maximum(var, eps)
    rstd = (1.0 / np.sqrt(var)).astype(x.dtype)
    xhat = diff * rstd[:, None]
    y = xhat * gain + shift
    return y, xhat, rstd, floored.astype(np.uint8)


def layer_norm_backward(dy, xhat, rstd, floored, gain):
    g = dy * gain
    mean_g = g.mean(axis=1, keepdims=True)
    mean_gx = (g * xhat).mean(axis=1, keepdims=True)
    mean_gx = np.where(floored[:, None].astype(bool), 0.0, mean_gx)
    dx = rstd[:, None] * (g - mean_g - xhat * mean_gx)
    dgain = (dy * xhat).sum(axis=0)
    dshift = dy.sum(axis=0)
    return dx.astype(dy.dtype, copy=False), dgain, dshift


def scatter_add_rows(n_rows, index, src):
    acc = np.zeros((n_rows, src.shape[1]), dtype=np.float64)
    np.add.at(acc, index, src)
    return acc.astype(src.dtype)
