"""Dense/spike tensor types and a reverse-mode differentiation tape.

Everything is numpy underneath. A Tensor wraps an ndarray plus an optional
record of how it was produced; backward() walks that record once, in reverse
topological order, and accumulates gradients into reachable leaves.
"""

from __future__ import annotations

import warnings

import numpy as np

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(EngineError):
    """A structural configuration constraint is violated."""


class ContractError(EngineError):
    """A documented call contract is violated."""


class CheckpointError(EngineError):
    """Checkpoint or dataset file is malformed, corrupt, or incompatible."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Multi-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = type(self).__name__
        return f"{tag}(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0


class SpikeTensor(Tensor):
    """Binary-valued tensor. Produced only by spiking-neuron ops.

    The constructor validates binarity; internal spiking ops build instances
    from threshold comparisons and skip the scan.
    """

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        if self.data.size and not bool(((self.data == 0.0) | (self.data == 1.0)).all()):
            raise ContractError("SpikeTensor values must be exactly 0 or 1")

    def firing_rate(self) -> float:
        if self.data.size == 0:
            return 0.0
        return float(self.data.mean())


class Parameter(Tensor):
    """Named trainable leaf; gradient buffer is pre-allocated to zeros."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


# -- node construction ----------------------------------------------------


def _leaf(data, cls=Tensor):
    out = Tensor.__new__(cls)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def make_node(data, parents, backward, cls=Tensor):
    """Create a tape node. `backward(grad)` returns one ndarray (or None) per parent."""
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out = Tensor.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return _leaf(data, cls)


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = _leaf(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = _leaf(np.asarray(b, dtype=a.data.dtype))
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}; cast explicitly")
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops -------------------------------------------------------


def add(a, b):
    a, b = _coerce(a, b)
    data = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return make_node(data, (a, b), bw)


def sub(a, b):
    a, b = _coerce(a, b)
    data = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return make_node(data, (a, b), bw)


def mul(a, b):
    a, b = _coerce(a, b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return make_node(data, (a, b), bw)


def div(a, b):
    a, b = _coerce(a, b)
    data = a.data / b.data
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return make_node(data, (a, b), bw)


def neg(a):
    def bw(g):
        return (-g,)

    return make_node(-a.data, (a,), bw)


def detach(a: Tensor) -> Tensor:
    return _leaf(a.data)


# -- matmul ----------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return make_node(data, (a, b), bw)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape):
    shape = tuple(shape)
    orig = a.data.shape
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(orig),)

    return make_node(data, (a,), bw, cls=type(a) if isinstance(a, SpikeTensor) else Tensor)


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return make_node(data, (a,), bw, cls=type(a) if isinstance(a, SpikeTensor) else Tensor)


def take_step(a: Tensor, t: int):
    """Select index `t` along the leading axis."""
    if not 0 <= t < a.data.shape[0]:
        raise ShapeError(f"step {t} out of range for leading axis of shape {a.data.shape}")
    data = a.data[t]
    full = a.data.shape

    def bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[t] = g
        return (out,)

    return make_node(data, (a,), bw, cls=type(a) if isinstance(a, SpikeTensor) else Tensor)


def stack_steps(parts):
    """Stack tensors along a new leading axis."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("stack_steps requires at least one tensor")
    data = np.stack([p.data for p in parts])
    cls = SpikeTensor if all(isinstance(p, SpikeTensor) for p in parts) else Tensor

    def bw(g):
        return tuple(g[i] for i in range(len(parts)))

    return make_node(data, parts, bw, cls=cls)


# -- reductions --------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(a_ % len(shape) for a_ in ax)
            g = np.expand_dims(g, tuple(sorted(ax)))
        return (np.broadcast_to(g, shape),)

    return make_node(data, (a,), bw)


def tensor_mean(a: Tensor, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for d in ax:
            count *= a.data.shape[d]
    s = tensor_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor, free_graph: bool = False):
    """Reverse-mode pass from a scalar loss.

    Accumulates into .grad of every reachable gradient-tracked leaf; repeated
    calls keep accumulating unless grads are zeroed. With free_graph=True the
    tape is torn down afterwards to release intermediate arrays.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    touched_leaf = False
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not (p.requires_grad or p._parents):
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            if free_graph:
                node._parents = ()
                node._backward = None
        elif node.requires_grad:
            touched_leaf = True
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                np.add(node.grad, g, out=node.grad)

    if not touched_leaf:
        warnings.warn("backward reached no gradient-tracked leaves; all gradients are empty", stacklevel=2)
