"""Differentiable ops used by the transformer.

Each op computes its forward pass with numpy (or a kernel from
``kernels``) and registers a closure that pushes gradients to its inputs.
"""
import math

import numpy as np

from . import kernels
from .tensor import Tensor, result

LAYER_NORM_EPS = 1e-5
PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class MaskError(ValueError):
    pass


def _needs(t):
    return t.requires_grad or t._backward is not None


def _send(t, g):
    if _needs(t):
        t.accumulate(g)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return result(a.values + b.values, (a, b), backward)


def mul_scalar(a, c):
    return result(a.values * a.dtype.type(c), (a,), lambda g: _send(a, g * a.dtype.type(c)))


def total(a):
    def backward(g):
        _send(a, np.broadcast_to(g, a.shape))

    return result(np.asarray(a.values.sum(dtype=np.float64), dtype=a.dtype), (a,), backward)


def relu(a):
    on = a.values > 0

    def backward(g):
        _send(a, g * on)

    return result(a.values * on, (a,), backward)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.shape[-1] != b.shape[-2 if b.values.ndim > 1 else 0]:
        raise DimensionError(f"cannot multiply shapes {list(a.shape)} and {list(b.shape)}")

    def backward(g):
        if _needs(a):
            _send(a, _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        if _needs(b):
            _send(b, _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))

    return result(a.values @ b.values, (a, b), backward)


def linear_forward(x, weights, bias):
    """``x[..., D_in] @ W[D_in, D_out] + bias[D_out]``."""
    if (
        weights.values.ndim != 2
        or x.shape[-1] != weights.shape[0]
        or bias.shape != (weights.shape[1],)
    ):
        raise DimensionError(
            f"linear shapes do not conform: input {list(x.shape)}, weights {list(weights.shape)}, "
            f"bias {list(bias.shape)}"
        )
    lead = x.shape[:-1]
    flat = x.values.reshape(-1, x.shape[-1])
    out = flat @ weights.values + bias.values

    def backward(g):
        g2 = g.reshape(-1, weights.shape[1])
        if _needs(x):
            _send(x, (g2 @ weights.values.T).reshape(x.shape))
        if _needs(weights):
            _send(weights, flat.T @ g2)
        if _needs(bias):
            _send(bias, g2.sum(axis=0))

    return result(out.reshape(*lead, weights.shape[1]), (x, weights, bias), backward)


def softmax(logits, axis=-1):
    x = np.moveaxis(logits.values, axis, -1)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        dx = p * (gm - (p * gm).sum(axis=-1, keepdims=True))
        _send(logits, np.moveaxis(dx, -1, axis))

    return result(np.ascontiguousarray(np.moveaxis(p, -1, axis)), (logits,), backward)


def layer_norm(x, gain, shift, eps=LAYER_NORM_EPS):
    """Normalise the last axis; variance is floored at ``eps`` (not added)."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm gain/shift {list(gain.shape)} do not match input {list(x.shape)}")
    flat = x.values.reshape(-1, d)
    y, xhat, rstd, floored = kernels.layer_norm_forward(flat, gain.values, shift.values, eps)

    def backward(g):
        dx, dgain, dshift = kernels.layer_norm_backward(g.reshape(-1, d), xhat, rstd, floored, gain.values)
        _send(x, dx.reshape(x.shape))
        _send(gain, dgain)
        _send(shift, dshift)

    return result(y.reshape(x.shape), (x, gain, shift), backward)


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for embedding table of {table.shape[0]} rows")

    def backward(g):
        _send(table, kernels.scatter_add_rows(table.shape[0], ids.reshape(-1), g.reshape(-1, table.shape[1])))

    return result(table.values[ids], (table,), backward)


def take_rows(x, index):
    """Select entries along axis 0 (repetition allowed); gradients are summed back."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        summed = kernels.scatter_add_rows(x.shape[0], index, g.reshape(len(index), -1))
        _send(x, summed.reshape(x.shape))

    return result(x.values[index], (x,), backward)


def multi_head_attention(queries, keys, values, mask, n_heads=1):
    """Scaled dot-product attention over ``n_heads`` slices of the model dim.

    queries [B, Tq, D], keys/values [B, Tk, D]; ``mask`` is boolean,
    broadcastable to [B, Tq, Tk], True where query q may attend to key k.
    Masked keys get weight exactly 0. Heads are concatenated on output.
    """
    b, tq, dim = queries.shape
    tk = keys.shape[1]
    if keys.shape != values.shape or keys.shape[0] != b or keys.shape[2] != dim:
        raise DimensionError(
            f"attention shapes do not conform: q {list(queries.shape)}, k {list(keys.shape)}, "
            f"v {list(values.shape)}"
        )
    if dim % n_heads:
        raise DimensionError(f"model dim {dim} not divisible by {n_heads} heads")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (b, tq, tk))
    if not mask.any(axis=-1).all():
        bad = np.argwhere(~mask.any(axis=-1))[0]
        raise MaskError(f"attention query row {tuple(int(i) for i in bad)} has every key masked")
    hd = dim // n_heads
    scale = queries.dtype.type(1.0 / math.sqrt(hd))

    def split(a):
        return a.reshape(b, a.shape[1], n_heads, hd).transpose(0, 2, 1, 3)

    q, k, v = split(queries.values), split(keys.values), split(values.values)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    full_mask = np.broadcast_to(mask[:, None], (b, n_heads, tq, tk))
    probs = kernels.masked_softmax(scores.reshape(-1, tk), full_mask.reshape(-1, tk)).reshape(b, n_heads, tq, tk)
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(b, tq, dim)

    def backward(g):
        gh = split(g)
        dprobs = gh @ v.transpose(0, 1, 3, 2)
        dscores = kernels.masked_softmax_backward(probs.reshape(-1, tk), dprobs.reshape(-1, tk)).reshape(probs.shape)
        dscores *= scale

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(b, a.shape[2], dim)

        if _needs(values):
            _send(values, merge(probs.transpose(0, 1, 3, 2) @ gh))
        if _needs(queries):
            _send(queries, merge(dscores @ k))
        if _needs(keys):
            _send(keys, merge(dscores.transpose(0, 1, 3, 2) @ q))

    return result(out, (queries, keys, values), backward)


def attention_weights(queries, keys, mask, n_heads=1):
    """Forward-only attention weights [B, H, Tq, Tk]; for inspection and tests."""
    b, tq, dim = queries.shape
    tk = keys.shape[1]
    hd = dim // n_heads
    q = queries.values.reshape(b, tq, n_heads, hd).transpose(0, 2, 1, 3)
    k = keys.values.reshape(b, tk, n_heads, hd).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(hd)
    full_mask = np.broadcast_to(np.broadcast_to(np.asarray(mask, dtype=bool), (b, tq, tk))[:, None], (b, n_heads, tq, tk))
    probs = kernels.masked_softmax(scores.reshape(-1, tk).astype(queries.dtype), full_mask.reshape(-1, tk))
    return probs.reshape(b, n_heads, tq, tk)


def weighted_nll(logits, targets, weights, floor=PROB_FLOOR):
    """Scalar ``-sum(w * log p[target])`` over positions with a nonzero weight.

    Returns ``(loss, probs, clamped)`` where ``probs`` holds the detached
    ground-truth probabilities and ``clamped`` counts cells below ``floor``
    (those contribute ``-log(floor)`` and no gradient).
    """
    x = logits.values
    v = x.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if targets.shape != x.shape[:-1] or weights.shape != targets.shape:
        raise DimensionError(
            f"nll shapes do not conform: logits {list(x.shape)}, targets {list(targets.shape)}, "
            f"weights {list(weights.shape)}"
        )
    safe_targets = np.where(weights != 0, targets, 0)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    log_z = np.log(z) + m
    picked = np.take_along_axis(x, safe_targets[..., None], axis=-1)[..., 0]
    logp = picked.astype(np.float64) - log_z[..., 0].astype(np.float64)
    probs = np.exp(logp)
    low = probs < floor
    clamped = int(np.count_nonzero(low & (weights != 0)))
    logp_used = np.where(low, math.log(floor), logp)
    loss = -(weights * logp_used).sum()

    def backward(g):
        w = (weights * (~low)) * np.asarray(g).item()
        soft = e / z
        grad = soft * w[..., None]
        np.put_along_axis(grad, safe_targets[..., None], np.take_along_axis(grad, safe_targets[..., None], -1) - w[..., None], -1)
        _send(logits, grad.astype(x.dtype))

    out = result(np.asarray(loss, dtype=x.dtype), (logits,), backward)
    return out, probs, clamped


def probabilities(logits):
    """Detached softmax over the last axis (numpy array)."""
    x = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
