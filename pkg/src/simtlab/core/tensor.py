"""Tensor with reverse-mode autodiff, precision switch, and parameter sets."""
from contextlib import contextmanager

import numpy as np

_dtype = np.float32
_grad_enabled = True


def get_dtype():
    return _dtype


@contextmanager
def precision(dtype):
    """Create tensors at ``dtype`` (float32 default, float64 for gradient checks)."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    previous = _dtype
    _dtype = dtype
    try:
        yield
    finally:
        _dtype = previous


@contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Row-major real array with a lazily allocated gradient.

    Ops build a graph of closures; ``backward`` walks it in reverse
    topological order and accumulates into ``grad``.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, dtype=None):
        self.values = np.ascontiguousarray(values, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name})"

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if g.shape != self.values.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.values.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.values)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.accumulate(np.asarray(grad, dtype=self.values.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not node.requires_grad:
                    node.grad = None


def result(values, parents, backward):
    """Wrap op output; records the graph edge only when a parent needs grad."""
    out = Tensor(values, dtype=values.dtype)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


class ParameterSet:
    """Named parameters iterated in lexicographic path order."""

    def __init__(self, tensors=None):
        self._tensors = {}
        for path, tensor in (tensors or {}).items():
            self[path] = tensor

    def __setitem__(self, path, tensor):
        if path in self._tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        tensor.requires_grad = True
        self._tensors[path] = tensor

    def __getitem__(self, path):
        return self._tensors[path]

    def __contains__(self, path):
        return path in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(sorted(self._tensors))

    def items(self):
        return [(p, self._tensors[p]) for p in sorted(self._tensors)]

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def astype(self, dtype):
        """Cast every parameter in place (used to enter 64-bit check mode)."""
        for tensor in self._tensors.values():
            tensor.values = tensor.values.astype(dtype)
            tensor.grad = None
        return self

    def snapshot(self):
        return {p: t.values.copy() for p, t in self.items()}

    def load(self, arrays):
        missing = set(self._tensors) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for path, tensor in self._tensors.items():
            value = np.asarray(arrays[path])
            if value.shape != tensor.shape:
                raise ValueError(f"{path}: shape {value.shape} != {tensor.shape}")
            tensor.values = np.ascontiguousarray(value, dtype=tensor.dtype)

    def count(self):
        return sum(t.values.size for t in self._tensors.values())
