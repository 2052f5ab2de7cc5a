"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything in this library that needs a gradient flows through the ops
defined here. The op set is deliberately small: dense matmul, the
elementwise functions required by LSTM cells and Gaussian log-densities,
reductions, log-sum-exp, concatenation, slicing, and the two indexed
lookups (embedding rows, per-row logit gather) needed for categorical
sequence likelihoods.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the op."""


class GradientError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, double backward)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense n-d float64 array, optionally recorded for differentiation.

    Non-leaf tensors keep references to their parents plus a backward rule
    mapping the upstream gradient to per-parent gradients; together these
    form the implicit tape that ``backward`` replays in reverse topological
    order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], rule) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise DomainError("non-finite values produced by a forward op")
        track = _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents)
        out = Tensor(data, requires_grad=False)
        if track:
            out._parents = tuple(parents)
            out._backward_rule = rule
        return out

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        data = _broadcast_op(self, other, np.add)
        return Tensor._make(data, (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        data = _broadcast_op(self, other, np.subtract)
        return Tensor._make(data, (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        data = _broadcast_op(self, other, np.multiply)
        a, b = self, other
        return Tensor._make(data, (a, b), lambda g: (
            _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return self * (1.0 / float(other))

    def __getitem__(self, key):
        data = self.data[key]
        shape = self.shape

        def rule(g):
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return Tensor._make(data, (self,), rule)

    # -- reverse mode ------------------------------------------------------

    def backward(self) -> dict["Tensor", np.ndarray]:
        """Run reverse-mode differentiation from this scalar.

        Accumulates into ``.grad`` of every reachable requires-grad leaf and
        returns the map of those leaves to their gradients. A second call on
        the same tape without a reset raises.
        """
        return Tape(self).backward()


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor."""

    def __init__(self, root: Tensor):
        if root.size != 1:
            raise GradientError(f"loss must be scalar, got shape {root.shape}")
        self.root = root
        self.nodes = _toposort(root)
        self._done = False

    def backward(self) -> dict[Tensor, np.ndarray]:
        if self._done:
            raise GradientError("backward already ran on this tape; reset first")
        self._done = True
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            if node._backward_rule is None:
                continue
            for parent, pg in zip(node._parents, node._backward_rule(g)):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return leaves

    def reset(self) -> None:
        """Clear leaf gradients and allow a fresh backward replay."""
        self._done = False
        for node in self.nodes:
            if node.requires_grad:
                node.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_op(a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from exc


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- op library -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    data = a.data @ b.data
    return Tensor._make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    if not np.all(np.isfinite(data)):
        raise DomainError("exp overflow")
    return Tensor._make(data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value")
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    return Tensor._make(data, (x,), lambda g: (g * (1.0 - data * data),))


def sigmoid(x: Tensor) -> Tensor:
    data = np.where(x.data >= 0,
                    1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    return Tensor._make(data, (x,), lambda g: (g * data * (1.0 - data),))


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    data = x.data.sum(axis=axis)
    shape = x.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._make(data, (x,), rule)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis) * (1.0 / n)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis (max-subtraction form)."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total

    def rule(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._make(data, (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis if axis >= 0 else p.data.ndim + axis] for p in parts]
    splits = np.cumsum(extents)[:-1]

    def rule(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return Tensor._make(data, tuple(parts), rule)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup (embedding): ids of shape (B,) pick rows of a (V, E) table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def rule(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(data, (table,), rule)


def gather_cols(x: Tensor, ids: np.ndarray) -> Tensor:
    """Per-row column pick: (B, V) with ids (B,) -> (B,)."""
    ids = np.asarray(ids)
    rows = np.arange(x.shape[0])
    data = x.data[rows, ids]

    def rule(g):
        full = np.zeros(x.shape)
        full[rows, ids] = g
        return (full,)

    return Tensor._make(data, (x,), rule)


# -- verification ---------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    loss = f(x)
    loss.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(point)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(point.copy())).item()
        flat[i] = orig - step
        lo = f(Tensor(point.copy())).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise DomainError("non-finite value during finite differencing")
        nflat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
