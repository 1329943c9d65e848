"""Dense NCHW tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 for gradient checks).
Each differentiable operation records a ``GraphNode`` holding its inputs and
a backward rule; ``backward()`` walks the graph once in reverse topological
order and fills ``grad`` on every reachable tensor that requires it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionMismatchError,
    MissingGraphError,
)

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def set_debug_checks(flag: bool) -> None:
    """Opt-in NaN/Inf detection after every forward op (off by default)."""
    global _debug_checks
    _debug_checks = bool(flag)


class GraphNode:
    """One recorded operation: op tag, input tensors, backward rule.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per parent,
    in parent order. Saved activations live in the closure.
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; scalars are broadcast like shape-() tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in output of {op}")


def make_op(op: str, parents: Sequence[Tensor], out_data: np.ndarray,
            backward_fn) -> Tensor:
    """Wrap a forward result, recording a graph node when grads are on."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad or p.node is not None for p in parents):
        out.node = GraphNode(op, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a_shape, b_shape) -> None:
    ra, rb = len(a_shape), len(b_shape)
    rank = max(ra, rb)
    for axis in range(rank):
        da = a_shape[axis - rank + ra] if axis - rank + ra >= 0 else 1
        db = b_shape[axis - rank + rb] if axis - rank + rb >= 0 else 1
        if da != db and da != 1 and db != 1:
            raise DimensionMismatchError(
                f"axis {axis}: extents {da} and {db} are not broadcast-compatible "
                f"(shapes {tuple(a_shape)} vs {tuple(b_shape)})")


def broadcast_binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add/mul with numpy broadcasting; grads sum over broadcast axes."""
    if kind not in ("add", "mul"):
        raise ContractError(f"unknown broadcast_binary kind {kind!r}")
    _check_broadcast(a.shape, b.shape)
    if kind == "add":
        out = a.data + b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    else:
        out = a.data * b.data
        a_data, b_data = a.data, b.data

        def backward(g):
            return (_unbroadcast(g * b_data, a.shape),
                    _unbroadcast(g * a_data, b.shape))

    return make_op(kind, (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return broadcast_binary("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return broadcast_binary("mul", a, b)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis (order preserved)."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    first = parts[0]
    if first.data.ndim != 4:
        raise DimensionMismatchError(
            f"concat_channels expects rank-4 NCHW tensors, got rank {first.data.ndim}")
    for i, p in enumerate(parts[1:], start=1):
        if p.data.ndim != 4:
            raise DimensionMismatchError(
                f"part {i}: expected rank 4, got rank {p.data.ndim}")
        for axis in (0, 2, 3):
            if p.shape[axis] != first.shape[axis]:
                raise DimensionMismatchError(
                    f"part {i} axis {axis}: extent {p.shape[axis]} != {first.shape[axis]}")
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return make_op("concat", parts, out, backward)


def _normalize_axes(axes, ndim) -> tuple:
    if axes is None:
        axes = range(ndim)
    axes = tuple(sorted(a % ndim for a in axes))
    for a in axes:
        if a < 0 or a >= ndim:
            raise ContractError(f"axis {a} out of range for rank {ndim}")
    if len(set(axes)) != len(axes):
        raise ContractError(f"duplicate axis in {axes}")
    return axes


def reduce_mean(x: Tensor, axes: Optional[Iterable[int]] = None) -> Tensor:
    """Mean over ``axes`` (all axes when None); reduced extents become 1."""
    if x.data.size == 0:
        raise DegenerateInputError("reduce_mean of an empty tensor")
    axes = _normalize_axes(axes, x.data.ndim)
    if not axes:
        return make_op("mean", (x,), x.data.copy(), lambda g: (g,))
    out = x.data.mean(axis=axes, keepdims=True)
    count = 1
    for a in axes:
        count *= x.shape[a]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g / count, shape).astype(g.dtype, copy=False),)

    return make_op("mean", (x,), out, backward)


def reduce_sum(x: Tensor, axes: Optional[Iterable[int]] = None) -> Tensor:
    """Sum over ``axes`` (all axes when None); reduced extents become 1."""
    if x.data.size == 0:
        raise DegenerateInputError("reduce_sum of an empty tensor")
    axes = _normalize_axes(axes, x.data.ndim)
    if not axes:
        return make_op("sum", (x,), x.data.copy(), lambda g: (g,))
    out = x.data.sum(axis=axes, keepdims=True)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)

    return make_op("sum", (x,), out, backward)


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order  # parents before children; walk reversed for backprop


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Fill ``grad`` on every requires_grad tensor reachable from ``loss``.

    Default semantics reset grads before filling; ``accumulate=True`` adds to
    whatever is already there. Gradients from shared subexpressions sum.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward needs a scalar loss (all extents 1), got shape {tuple(loss.shape)}")
    if loss.node is None and not loss.requires_grad:
        raise MissingGraphError(
            "loss tensor has no computation graph attached and is not a leaf parameter")

    order = _toposort(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    written: set[int] = set()
    for t in reversed(order):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            _write_grad(t, g, accumulate)
            written.add(id(t))
        if t.node is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None:
                continue
            acc = flowing.get(id(p))
            flowing[id(p)] = pg if acc is None else acc + pg
    # reachable parameters that received no flow still get a (zero) gradient
    for t in order:
        if t.requires_grad and id(t) not in written:
            _write_grad(t, np.zeros_like(t.data), accumulate)


def _write_grad(t: Tensor, g: np.ndarray, accumulate: bool) -> None:
    if accumulate and t.grad is not None:
        t.grad = t.grad + g
    else:
        t.grad = g.copy()


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor,
                               eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, element by element."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = x.data.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    with no_grad():
        while not it.finished:
            idx = it.multi_index
            x.data = base.copy()
            x.data[idx] = base[idx] + eps
            f_plus = f(x)
            x.data = base.copy()
            x.data[idx] = base[idx] - eps
            f_minus = f(x)
            if f_plus.data.size != 1 or f_minus.data.size != 1:
                x.data = base
                raise ContractError("finite_difference_gradient needs a scalar-valued f")
            grad[idx] = (float(f_plus.data) - float(f_minus.data)) / (2.0 * eps)
            it.iternext()
    x.data = base
    return Tensor(grad)
