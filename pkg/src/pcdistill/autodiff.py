"""A small reverse-mode autodiff core over numpy arrays.

Each ``Tensor`` records its parents and a closure that pushes the upstream
gradient back to them. ``backward`` walks the graph in reverse topological
order. Only the ops the denoiser and the losses need are provided.
"""

from __future__ import annotations

import numpy as np


class StateError(RuntimeError):
    """An operation was called in the wrong state (no graph, no gradients)."""


class GraphError(StateError):
    """Raised when backward is called on something without a recorded graph."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> Tensor:
        return Tensor(self.value.copy())

    def zero_grad(self):
        self.grad = None

    # graph construction ------------------------------------------------
    @staticmethod
    def _make(value, parents, backward) -> Tensor:
        live = tuple(p for p in parents if p.requires_grad)
        out = Tensor(value, requires_grad=bool(live))
        if live:
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None):
        if not self.requires_grad:
            raise GraphError("tensor has no recorded graph (no parameter participates)")
        if grad is None:
            if self.value.size != 1:
                raise GraphError("backward without an explicit gradient needs a scalar")
            grad = np.ones_like(self.value)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.value + other.value,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.shape, other.shape
        av, bv = self.value, other.value
        return Tensor._make(
            av * bv,
            (self, other),
            lambda g: (_unbroadcast(g * bv, a), _unbroadcast(g * av, b)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other):
        other = _lift(other)
        av, bv = self.value, other.value
        return Tensor._make(av @ bv, (self, other), lambda g: (g @ bv.T, av.T @ g))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.value[idx], (self,), back)

    def sum(self, axis=None):
        shape = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.value.sum(axis=axis), (self,), back)

    def mean(self, axis=None):
        count = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / count)

    def square(self):
        v = self.value
        return Tensor._make(v * v, (self,), lambda g: (2.0 * v * g,))

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Tensor._make(self.value.T, (self,), lambda g: (g.T,))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def silu(x: Tensor) -> Tensor:
    v = x.value
    s = 1.0 / (1.0 + np.exp(-v))
    return Tensor._make(v * s, (x,), lambda g: (g * (s * (1.0 + v * (1.0 - s))),))


def safe_sqrt(x: Tensor) -> Tensor:
    """Elementwise sqrt whose gradient is taken as 0 where the input is 0."""
    v = x.value
    r = np.sqrt(np.maximum(v, 0.0))

    def back(g):
        out = np.zeros_like(v)
        nz = r > 0
        out[nz] = g[nz] / (2.0 * r[nz])
        return (out,)

    return Tensor._make(r, (x,), back)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stop_gradient(x) -> Tensor:
    return Tensor(x.value if isinstance(x, Tensor) else x)


def pairwise_distances(x: Tensor) -> Tensor:
    """Euclidean distance matrix among the rows of an (n, 3) tensor."""
    diff = x.reshape(x.shape[0], 1, x.shape[1]) - x.reshape(1, x.shape[0], x.shape[1])
    return safe_sqrt(diff.square().sum(axis=2))
