"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records its
parents and a backward rule on the output.  ``Tensor.backward`` orders the
recorded graph topologically and replays the rules in reverse, accumulating
into the ``grad`` slot of every leaf that asked for one.

Elementwise operations accept two shapes only: identical shapes, or one
operand whose shape equals the other's shape without its leading (batch)
dimension.  Python scalars are treated as constants.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "tensor_max",
    "finite_diff_grad",
    "relative_error",
    "to_text",
    "from_text",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim > 0 and 0 in arr.shape:
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    return arr


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            if 0 in data.shape:
                raise ShapeError(f"tensor extents must be positive, got {data.shape}")
            self.data = data
        else:
            self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def max(self, axis=None):
        return tensor_max(self, axis)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a 1-element loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim == 0 or b.ndim == 0 or a.shape == b.shape:
        return
    if a.shape[1:] == b.shape or b.shape[1:] == a.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, sa), _reduce_to(g * ad, sb)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing; the backward scatters into zeros."""
    a = _lift(a)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return Tensor._result(np.array(a.data[index]), (a,), backward, "take")


def tensor_sum(a, axis=None) -> Tensor:
    a = _lift(a)
    src = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def tensor_mean(a, axis=None) -> Tensor:
    a = _lift(a)
    src = a.shape
    count = a.size if axis is None else np.prod([src[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return Tensor._result(np.asarray(a.data.mean(axis=axis)), (a,), backward, "mean")


def tensor_max(a, axis: int | None = None) -> Tensor:
    """Maximum; the gradient goes to the first maximal element in scan order."""
    a = _lift(a)
    src = a.shape
    if axis is None:
        idx = int(np.argmax(a.data))

        def backward(g):
            out = np.zeros(a.size)
            out[idx] = g.reshape(())
            return (out.reshape(src),)

        return Tensor._result(np.asarray(a.data.reshape(-1)[idx]), (a,), backward, "max")

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    value = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros(src)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return Tensor._result(value, (a,), backward, "max")


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)

    def value(arr):
        out = f(Tensor(arr.reshape(base.shape)))
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = value(flat)
        flat[i] = old - h
        down = value(flat)
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return Tensor(grad.reshape(base.shape))


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), taken elementwise."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def to_text(t: Tensor | np.ndarray) -> str:
    """Serialize as a ``shape:`` header line followed by the row-major values."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = "shape: " + " ".join(str(d) for d in data.shape)
    values = " ".join(repr(float(v)) for v in data.reshape(-1))
    return header.rstrip() + "\n" + values + "\n"


def from_text(text: str) -> Tensor:
    lines = text.strip().split("\n", 1)
    head = lines[0].strip()
    if not head.startswith("shape:"):
        raise ValueError(f"expected 'shape:' header, got {head!r}")
    shape = tuple(int(tok) for tok in head[len("shape:"):].split())
    body = lines[1].split() if len(lines) > 1 else []
    values = np.array([float(tok) for tok in body], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise ValueError(f"shape {shape} needs {expected} values, found {values.size}")
    return Tensor(values.reshape(shape))
