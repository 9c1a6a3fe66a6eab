"""Small reverse-mode automatic differentiation over dense float arrays.

Graphs are built by running ordinary Python code on :class:`Tensor` objects
(define-by-run); each evaluation builds a fresh graph and nothing is retained
across steps.  The primitive set is what a GRU-class sequence model needs:
matmul, elementwise arithmetic, tanh, sigmoid, exp/log, embedding lookup,
log-softmax, gather, slicing, stacking and sum/mean reductions.

Example::

    x = Tensor(3.0, requires_grad=True)
    y = x * x
    grads = backward(y, {"x": x})   # {"x": array(6.)}
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a forward value becomes NaN or infinite."""


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out the axes numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph holding a float array."""

    # numpy must defer to our reflected operators (ndarray + Tensor).
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = _node(_check(self.data + other.data, "add"), (self, other), "add")

        def back(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,), "neg")
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = _node(_check(self.data * other.data, "mul"), (self, other), "mul")

        def back(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / other)

    def __pow__(self, exponent: int):
        if exponent != int(exponent):
            raise ValueError("only integer powers are supported")
        n = int(exponent)
        out = _node(_check(self.data**n, "pow"), (self,), "pow")
        out._backward = lambda g: self._accumulate(g * n * self.data ** (n - 1))
        return out

    def reciprocal(self):
        out = _node(_check(1.0 / self.data, "reciprocal"), (self,), "reciprocal")
        out._backward = lambda g: self._accumulate(-g * out.data**2)
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = _node(_check(self.data @ other.data, "matmul"), (self, other), "matmul")

        def back(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:
                self._accumulate(g * b)
                other._accumulate(g * a)
            elif a.ndim == 1:
                self._accumulate(b @ g)
                other._accumulate(np.outer(a, g))
            elif b.ndim == 1:
                self._accumulate(np.outer(g, b))
                other._accumulate(a.T @ g)
            else:
                self._accumulate(g @ b.T)
                other._accumulate(a.T @ g)

        out._backward = back
        return out

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, key):
        out = _node(self.data[key], (self,), "getitem")

        def back(g):
            full = np.zeros_like(self.data)
            if _is_basic_index(key):
                full[key] = g
            else:
                np.add.at(full, key, g)
            self._accumulate(full)

        out._backward = back
        return out

    # elementwise functions -------------------------------------------

    def tanh(self):
        out = _node(np.tanh(self.data), (self,), "tanh")
        out._backward = lambda g: self._accumulate(g * (1.0 - out.data**2))
        return out

    def sigmoid(self):
        x = self.data
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        val = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out = _node(val, (self,), "sigmoid")
        out._backward = lambda g: self._accumulate(g * out.data * (1.0 - out.data))
        return out

    def exp(self):
        with np.errstate(over="ignore"):
            value = np.exp(self.data)
        out = _node(_check(value, "exp"), (self,), "exp")
        out._backward = lambda g: self._accumulate(g * out.data)
        return out

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.log(self.data)
        out = _node(_check(value, "log"), (self,), "log")
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    # reductions ---------------------------------------------------------

    def sum(self, axis=None):
        out = _node(np.sum(self.data, axis=axis), (self,), "sum")

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out._backward = back
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        out = _node(self.data.reshape(*shape), (self,), "reshape")
        out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return out

    def log_softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = _node(_check(shifted - lse, "log_softmax"), (self,), "log_softmax")

        def back(g):
            p = np.exp(out.data)
            self._accumulate(g - p * g.sum(axis=axis, keepdims=True))

        out._backward = back
        return out

    def softmax(self, axis: int = -1):
        return self.log_softmax(axis).exp()

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _node(data, parents, op) -> Tensor:
    return Tensor(data, _parents=parents, _op=op)


def _is_basic_index(key) -> bool:
    # basic indexing never repeats an element, so plain assignment is safe
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in keys)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recurrent graphs are too deep for recursion
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# functional forms ------------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def exp(x: Tensor) -> Tensor:
    return x.exp()


def log(x: Tensor) -> Tensor:
    return x.log()


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.log_softmax(axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    idx = np.asarray(indices, dtype=np.int64)
    out = _node(table.data[idx], (table,), "embedding")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    out._backward = back
    return out


def gather(x: Tensor, indices) -> Tensor:
    """Pick ``x[i, indices[i]]`` from a 2-D tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = _node(x.data[rows, idx], (x,), "gather")

    def back(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        x._accumulate(full)

    out._backward = back
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = _node(np.stack([t.data for t in ts], axis=axis), tuple(ts), "stack")

    def back(g):
        for i, t in enumerate(ts):
            t._accumulate(np.take(g, i, axis=axis))

    out._backward = back
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    out._backward = back
    return out


# graph evaluation ------------------------------------------------------


def forward(fn: Callable[..., Tensor], bindings: Mapping[str, np.ndarray]) -> tuple[Tensor, dict[str, Tensor]]:
    """Bind leaf values, run ``fn`` to build the graph and return its root.

    Returns the root together with the leaf tensors so :func:`backward` can be
    called on them.
    """
    leaves = {name: Tensor(np.array(value, dtype=np.float64), requires_grad=True) for name, value in bindings.items()}
    root = fn(**leaves)
    _check(root.data, "root")
    return root, leaves


def backward(root: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar root with respect to each named leaf.

    Leaves that do not influence the root get all-zero gradients.
    """
    root.backward()
    return {
        name: (np.zeros_like(t.data) if t.grad is None else np.array(t.grad))
        for name, t in leaves.items()
    }


def value_and_grad(fn: Callable[..., Tensor], bindings: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    root, leaves = forward(fn, bindings)
    return root.item(), backward(root, leaves)


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        orig = probe[i]
        probe[i] = orig + h
        fp = f(probe)
        probe[i] = orig - h
        fm = f(probe)
        probe[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
