"""Kernel backend selection.

The compiled module is used when it imports; ``SIMTLAB_BACKEND=python``
forces the numpy fallback. ``use_backend`` switches at runtime, which the
benchmark and the cross-backend tests rely on.
"""
import os
from contextlib import contextmanager

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _kernels_py
_active_name = "python"


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active_name


def set_backend(name):
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    _active = _BACKENDS[name]
    _active_name = name


@contextmanager
def use_backend(name):
    previous = _active_name
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


_requested = os.environ.get("SIMTLAB_BACKEND", "compiled" if _compiled is not None else "python")
set_backend(_requested if _requested in _BACKENDS else "python")


def masked_softmax(x, mask):
    x = np.ascontiguousarray(x)
    mask = np.ascontiguousarray(mask, dtype=bool).view(np.uint8)
    if _active is _kernels_py:
        return _active.masked_softmax(x, mask.view(bool))
    return _active.masked_softmax(x, mask)


def masked_softmax_backward(p, dp):
    return _active.masked_softmax_backward(np.ascontiguousarray(p), np.ascontiguousarray(dp, dtype=p.dtype))


def layer_norm_forward(x, gain, shift, eps):
    x = np.ascontiguousarray(x)
    return _active.layer_norm_forward(
        x, np.ascontiguousarray(gain, dtype=x.dtype), np.ascontiguousarray(shift, dtype=x.dtype), float(eps)
    )


def layer_norm_backward(dy, xhat, rstd, floored, gain):
    dy = np.ascontiguousarray(dy, dtype=xhat.dtype)
    return _active.layer_norm_backward(dy, xhat, rstd, floored, np.ascontiguousarray(gain, dtype=xhat.dtype))


def scatter_add_rows(n_rows, index, src):
    index = np.ascontiguousarray(index, dtype=np.int64)
    return _active.scatter_add_rows(int(n_rows), index, np.ascontiguousarray(src))
