"""A small reverse-mode differentiation engine over float64 numpy arrays.

Every forward op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. Calling
:func:`backward` on a scalar walks that DAG in reverse topological order.

Binary ops only accept operands of identical shape, or a scalar (a Python
number or a 0-d tensor) paired with a tensor. Any other broadcast must be
spelled out with :func:`expand`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, NotScalarLoss, ShapeMismatch


class Tensor:
    __array_priority__ = 100  # keep numpy scalars from hijacking operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ (use expand)")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    # only scalar broadcasting is legal, so reducing to () is the only case
    return np.sum(g) if _is_scalar(t) and g.ndim else g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a), _unbroadcast(-g * out / b.data, b)

    return _record(out, (a, b), grad_fn, "div")


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def square(x: Tensor) -> Tensor:
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (np.divide(0.5 * g, out, out=np.zeros_like(out), where=out > 0),), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(np.sum(x.data, axis=axis), (x,), grad_fn, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def euclidean_norm(x: Tensor, axis: int = -1) -> Tensor:
    """L2 norm along ``axis``; the gradient at the origin is taken as 0."""
    out = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def grad_fn(g):
        n = np.expand_dims(out, axis)
        unit = np.divide(x.data, n, out=np.zeros_like(x.data), where=n > 0)
        return (np.expand_dims(g, axis) * unit,)

    return _record(out, (x,), grad_fn, "norm")


# ---------------------------------------------------------------- structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, grad_fn, "concat")


def slice_(x: Tensor, idx) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx].copy(), (x,), grad_fn, "slice")


def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeMismatch(f"expand: cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.data.ndim

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _record(out, (x,), grad_fn, "expand")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if loss.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------- gradcheck


@dataclass
class GradcheckReport:
    max_rel_error: float
    tolerance: float
    per_leaf: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradcheck(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-5,
) -> GradcheckReport:
    """Compare analytic gradients of ``f()`` with central finite differences.

    ``f`` must rebuild its graph from the current contents of ``leaves`` on
    every call. The relative error is ``max |analytic - numeric|`` divided by
    the largest gradient magnitude across all leaves, so entries with tiny
    gradients are not drowned by finite-difference round-off.
    """
    for leaf in leaves:
        leaf.grad = None
    backward(f())
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    numeric = []
    for leaf in leaves:
        num = np.zeros(leaf.shape)
        flat = leaf.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        numeric.append(num)

    scale = max([np.abs(a).max(initial=0.0) for a in analytic] + [np.abs(n).max(initial=0.0) for n in numeric])
    scale = max(scale, 1e-12)
    per_leaf = {}
    worst = 0.0
    for i, (leaf, a, n) in enumerate(zip(leaves, analytic, numeric)):
        err = float(np.abs(a - n).max(initial=0.0) / scale)
        per_leaf[leaf.name or f"leaf{i}"] = err
        worst = max(worst, err)
    return GradcheckReport(worst, tolerance, per_leaf)
