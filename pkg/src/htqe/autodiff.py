"""A small reverse-mode automatic differentiation kernel over numpy arrays.

Every tensor is dense, row-major and float64.  Operations record their
operands and a backward rule on the output tensor; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order.

Broadcasting is deliberately absent except for a Python scalar (or a 0-d
tensor) combined with a tensor.  Anything else must go through the explicit
:func:`expand` op so that shape bugs surface as errors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


def _topological_order(root: Tensor) -> list[Tensor]:
    """Operands strictly precede their consumers in the returned list."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if _is_scalar(t) and g.ndim else g


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)

    def backward(g):
        return _unscalar(g, a), _unscalar(g, b)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)

    def backward(g):
        return _unscalar(g, a), _unscalar(-g, b)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unscalar(g * bd, a) if a.requires_grad else None,
                _unscalar(g * ad, b) if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0  # subgradient 0 at exactly 0

    def backward(g):
        return (g * positive,)

    return _result(np.where(positive, x.data, 0.0), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), backward)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def backward(g):
        return (2.0 * g * xd,)

    return _result(xd * xd, (x,), backward)


_ELEMENTWISE = {
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid,
    "add": add, "mul": mul, "sub": sub,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise op by name (relu, tanh, sigmoid, add, mul, sub)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions, shape ops

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _result(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules, size-1 axes only)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.data.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _result(np.array(x.data[index]), (x,), backward)


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d table; result shape is ``indices.shape + (cols,)``."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d table, got {table.shape}")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[idx], (table,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no parts")
    ndim = parts[0].data.ndim
    ax = axis % ndim if ndim else 0
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(p.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape} along axis {axis}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        sl = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return out

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    expanded = []
    for p in parts:
        new_shape = list(p.shape)
        new_shape.insert(axis % (p.data.ndim + 1), 1)
        expanded.append(reshape(p, new_shape))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- softmax

def softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is false get weight exactly 0."""
    x = as_tensor(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax of an empty tensor")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != {z.shape}")
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: every position along an axis is masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


# ---------------------------------------------------------------- finite differences

def gradient_check(f: Callable[[], Tensor | float], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated from scratch on every call and must be deterministic.
    Inputs sitting exactly on a relu kink should be nudged off it by the caller.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not isinstance(loss, Tensor):
        raise TypeError("f must return a Tensor for the analytic pass")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        out = f()
        v = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(v):
            raise FloatingPointError("non-finite evaluation during gradient check")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            an = a.reshape(-1)[i]
            err = abs(an - num) / max(abs(an), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
