"""Array-valued reverse-mode automatic differentiation over float64.

Every operation produces a new `Tensor` that records its parents and a
closure routing the output gradient back to them; `backward()` on a scalar
walks the recorded graph once in reverse topological order. Only the ops
this package needs are implemented; everything is eager numpy underneath.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` back down to `shape` (the reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.shape != ():
            raise UsageError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._acc(np.ones_like(self.data))
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = _result(self.data + other.data, (self, other))
        if out._parents:

            def grad_fn(g):
                if self.requires_grad:
                    self._acc(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._acc(_unbroadcast(g, other.data.shape))

            out._grad_fn = grad_fn
        return out

    def __mul__(self, other):
        other = as_tensor(other)
        out = _result(self.data * other.data, (self, other))
        if out._parents:

            def grad_fn(g):
                if self.requires_grad:
                    self._acc(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._acc(_unbroadcast(g * self.data, other.data.shape))

            out._grad_fn = grad_fn
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise UsageError("only scalar exponents are supported")
        out = _result(self.data**exponent, (self,))
        if out._parents:

            def grad_fn(g):
                self._acc(g * exponent * self.data ** (exponent - 1))

            out._grad_fn = grad_fn
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise DimensionError(
                f"matmul requires >=2-d operands, got {self.data.shape} @ {other.data.shape}"
            )
        if self.data.shape[-1] != other.data.shape[-2]:
            raise DimensionError(
                f"matmul inner dims differ: {self.data.shape} @ {other.data.shape}"
            )
        out = _result(self.data @ other.data, (self, other))
        if out._parents:

            def grad_fn(g):
                if self.requires_grad:
                    ga = g @ np.swapaxes(other.data, -1, -2)
                    self._acc(_unbroadcast(ga, self.data.shape))
                if other.requires_grad:
                    gb = np.swapaxes(self.data, -1, -2) @ g
                    other._acc(_unbroadcast(gb, other.data.shape))

            out._grad_fn = grad_fn
        return out

    def __neg__(self):
        return self * -1.0

    def __radd__(self, other):
        return self + other

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other**-1.0

    def __rtruediv__(self, other):
        return as_tensor(other) * self**-1.0

    def __getitem__(self, key):
        out = _result(self.data[key], (self,))
        if out._parents:

            def grad_fn(g):
                full = np.zeros_like(self.data)
                full[key] += g
                self._acc(full)

            out._grad_fn = grad_fn
        return out

    # -- shape manipulation ---------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _result(self.data.reshape(shape), (self,))
        if out._parents:

            def grad_fn(g):
                self._acc(g.reshape(self.data.shape))

            out._grad_fn = grad_fn
        return out

    def swapaxes(self, a: int, b: int):
        out = _result(np.swapaxes(self.data, a, b), (self,))
        if out._parents:

            def grad_fn(g):
                self._acc(np.swapaxes(g, a, b))

            out._grad_fn = grad_fn
        return out

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:

            def grad_fn(g):
                if axis is None:
                    self._acc(np.broadcast_to(g, self.data.shape).copy())
                    return
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._acc(np.broadcast_to(g, self.data.shape).copy())

            out._grad_fn = grad_fn
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise transcendentals --------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = _result(y, (self,))
        if out._parents:
            out._grad_fn = lambda g: self._acc(g * y)
        return out

    def log(self):
        out = _result(np.log(self.data), (self,))
        if out._parents:
            out._grad_fn = lambda g: self._acc(g / self.data)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = _result(y, (self,))
        if out._parents:
            out._grad_fn = lambda g: self._acc(g * (1.0 - y * y))
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = _result(y, (self,))
        if out._parents:
            out._grad_fn = lambda g: self._acc(g * 0.5 / y)
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out._grad_fn = None
    if _grad_enabled:
        parents = tuple(p for p in inputs if p.requires_grad)
    else:
        parents = ()
    out._parents = parents
    out.requires_grad = bool(parents)
    return out


# -- free functions --------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def grad_fn(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._acc(piece)

        out._grad_fn = grad_fn
    return out


def take(t: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along axis 0 with an integer index array (scatter-add backward)."""
    if axis != 0:
        raise UsageError("take only supports axis=0")
    t = as_tensor(t)
    idx = np.asarray(indices)
    out = _result(t.data[idx], (t,))
    if out._parents:

        def grad_fn(g):
            full = np.zeros_like(t.data)
            np.add.at(full, idx, g)
            t._acc(full)

        out._grad_fn = grad_fn
    return out


def broadcast_to(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    out = _result(np.broadcast_to(t.data, shape), (t,))
    if out._parents:
        out._grad_fn = lambda g: t._acc(_unbroadcast(g, t.data.shape))
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (fused forward/backward)."""
    t = as_tensor(t)
    shifted = t.data - np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (t,))
    if out._parents:

        def grad_fn(g):
            t._acc(y * (g - np.sum(g * y, axis=axis, keepdims=True)))

        out._grad_fn = grad_fn
    return out


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - np.max(t.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    out = _result(y, (t,))
    if out._parents:
        sm = np.exp(y)

        def grad_fn(g):
            t._acc(g - sm * np.sum(g, axis=axis, keepdims=True))

        out._grad_fn = grad_fn
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(t: Tensor) -> Tensor:
    """Smooth gating nonlinearity x * Phi(x), tanh approximation."""
    t = as_tensor(t)
    x = t.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)
    out = _result(y, (t,))
    if out._parents:

        def grad_fn(g):
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
            t._acc(g * dy)

        out._grad_fn = grad_fn
    return out


def silu(t: Tensor) -> Tensor:
    """Smooth gating nonlinearity x * sigmoid(x)."""
    t = as_tensor(t)
    sig = 1.0 / (1.0 + np.exp(-t.data))
    y = t.data * sig
    out = _result(y, (t,))
    if out._parents:

        def grad_fn(g):
            t._acc(g * sig * (1.0 + t.data * (1.0 - sig)))

        out._grad_fn = grad_fn
    return out


def normalize_rows(t: Tensor) -> Tensor:
    """Scale the last axis to unit L2 norm. Rows must be nonzero."""
    t = as_tensor(t)
    return t * (t * t).sum(axis=-1, keepdims=True) ** -0.5


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then affine."""
    t = as_tensor(t)
    centered = t - t.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gamma + beta
