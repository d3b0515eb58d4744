"""Adam with bias correction and optional inverse-sqrt learning-rate decay."""
import math
from dataclasses import dataclass, field

import numpy as np


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    warmup: int = 0  # >0 selects inverse-sqrt decay after `warmup` steps
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self):
        if self.warmup <= 0:
            return self.lr
        t = max(self.step, 1)
        return self.lr * min(t / self.warmup, math.sqrt(self.warmup / t))


def adam_step(params, state):
    """Apply one Adam update to every parameter, then clear gradients."""
    for path, tensor in params.items():
        if tensor.grad is None:
            raise MissingGradientError(f"no gradient for parameter {path!r}")
    state.step += 1
    t = state.step
    lr = state.current_lr()
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for path, tensor in params.items():
        g = tensor.grad
        dtype = tensor.values.dtype
        if path not in state.m:
            state.m[path] = np.zeros_like(tensor.values)
            state.v[path] = np.zeros_like(tensor.values)
        m, v = state.m[path], state.v[path]
        m *= dtype.type(state.beta1)
        m += dtype.type(1.0 - state.beta1) * g
        v *= dtype.type(state.beta2)
        v += dtype.type(1.0 - state.beta2) * (g * g)
        update = (m / dtype.type(c1)) / (np.sqrt(v / dtype.type(c2)) + dtype.type(state.eps))
        tensor.values -= dtype.type(lr) * update
        tensor.grad = None
    return params, state
