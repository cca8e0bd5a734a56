"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Operations on tensors that
require gradients record a :class:`TapeNode` holding the parents and a closure
that maps the output gradient to parent gradients. :meth:`Tensor.backward`
walks the tape once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "reduce_sum",
    "reduce_mean",
    "repeat_axis",
    "reshape",
    "flatten",
    "transpose",
    "concatenate",
    "split",
    "slice_axis",
    "squeeze",
    "unsqueeze",
    "contract_axis",
    "exp",
    "log",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeNode:
    """One recorded operation: op tag, parent tensors and the backward rule.

    Saved forward values live in the closure ``backward``.  It receives the
    output gradient and returns one gradient (or ``None``) per parent.
    """

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self):
        return f"TapeNode(op={self.op!r}, n_parents={len(self.parents)})"


class Tensor:
    __array_priority__ = 1000  # so ndarray <op> Tensor dispatches here

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = np.float32 if getattr(data, "dtype", None) == np.float32 else np.float64
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = _contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self._released = False

    # construction from an op ------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by op {op!r}")
        out = cls.__new__(cls)
        out.data = _contiguous(np.asarray(data))
        out.grad = None
        out._released = False
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out.node = TapeNode(op, tuple(parents), backward) if needs else None
        return out

    # basic properties -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # differentiation --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires grad.  The tape is released afterwards."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar tensor, got shape {self.shape}")
        if self._released:
            raise RuntimeError("backward() called twice on the same graph; run a new forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor is not on the tape (requires_grad=False)")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            pgrads = t.node.backward(g)
            for p, pg in zip(t.node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in order:
            if t.node is not None:
                t.node = None
                t._released = True

    # operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _topological_order(root: Tensor) -> list[Tensor]:
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axis(axis: int, ndim: int, *, allow_end: bool = False) -> int:
    limit = ndim + 1 if allow_end else ndim
    if not -limit <= axis < limit:
        raise IndexError(f"axis {axis} out of range for rank {ndim}")
    return axis % limit


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor._from_op(a.data * s, "scale", (a,), lambda g: (g * s,))
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, "mul", (a, b), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(x.data)
    return Tensor._from_op(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise FloatingPointError("log of non-positive value")
    return Tensor._from_op(np.log(xd), "log", (x,), lambda g: (g / xd,))


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(ad @ bd, "matmul", (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, "softmax", (x,), backward)


def contract_axis(x: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant linear map along one axis:
    ``y[..., i, ...] = sum_j matrix[i, j] * x[..., j, ...]``."""
    axis = _norm_axis(axis, x.ndim)
    m = np.asarray(matrix, dtype=x.dtype)
    if m.ndim != 2 or m.shape[1] != x.shape[axis]:
        raise ValueError(f"matrix {m.shape} does not act on axis {axis} of extent {x.shape[axis]}")
    y = np.moveaxis(np.tensordot(m, x.data, axes=([1], [axis])), 0, axis)

    def backward(g):
        gx = np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis)
        return (gx,)

    return Tensor._from_op(y, "contract_axis", (x,), backward)


# reductions ----------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        return Tensor._from_op(np.asarray(x.data.sum()), "sum", (x,),
                               lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _norm_axis(axis, x.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(x.data.sum(axis=axis), "sum", (x,), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        return Tensor._from_op(np.asarray(x.data.mean()), "mean", (x,),
                               lambda g: (np.full(shape, g.item() / n, dtype=x.dtype),))
    axis = _norm_axis(axis, x.ndim)
    n = shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    # shifted by the first slice so means of repeated slices are exact
    first = np.take(x.data, [0], axis=axis)
    out = np.squeeze(first, axis) + (x.data - first).mean(axis=axis)
    return Tensor._from_op(out, "mean", (x,), backward)


# shape manipulation --------------------------------------------------------

def repeat_axis(x: Tensor, axis: int, times: int) -> Tensor:
    """Insert a new axis at ``axis`` holding ``times`` copies of ``x``."""
    if int(times) != times or times < 1:
        raise ValueError(f"times must be a positive integer, got {times}")
    axis = _norm_axis(axis, x.ndim, allow_end=True)
    out = np.repeat(np.expand_dims(x.data, axis), int(times), axis=axis)
    return Tensor._from_op(out, "repeat_axis", (x,), lambda g: (g.sum(axis=axis),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    out = x.data.reshape(shape)
    return Tensor._from_op(out, "reshape", (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    start_axis = _norm_axis(start_axis, x.ndim)
    return reshape(x, x.shape[:start_axis] + (-1,))


def squeeze(x: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] != 1:
        raise ValueError(f"cannot squeeze axis {axis} of extent {x.shape[axis]}")
    return reshape(x, x.shape[:axis] + x.shape[axis + 1:])


def unsqueeze(x: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, x.ndim, allow_end=True)
    return reshape(x, x.shape[:axis] + (1,) + x.shape[axis:])


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), "transpose", (x,),
                           lambda g: (np.transpose(g, inv),))


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concatenate needs at least one tensor")
    axis = _norm_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           "concatenate", tuple(tensors), backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise IndexError(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return Tensor._from_op(x.data[idx].copy(), "slice", (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = _norm_axis(axis, x.ndim)
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


def relative_error(a, b, floor: float = 1e-7) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

