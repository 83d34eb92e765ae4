"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable
primitive records the tensors it consumed and a closure mapping the output
gradient to input gradients. :func:`build_tape` orders the recorded graph
topologically and :meth:`Tensor.backward` replays it in reverse.

Binary primitives never broadcast: operands must have identical shapes.
Python scalars are accepted by ``scale``/``shift`` (and the ``*``, ``/``,
``+``, ``-`` operators) as the only exception. Use :func:`expand` to
broadcast explicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.dtype(np.float32)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` accumulate into ``grad`` on
    every call to :meth:`backward`; call :meth:`zero_grad` to reset.
    """

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            dtype = np.dtype(dtype)
            if dtype not in FLOAT_DTYPES:
                raise ContractError(f"unsupported tensor dtype {dtype}")
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in FLOAT_DTYPES:
                arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op: str | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from self."""
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return
        tape = build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def relu(self):
        return relu(self)


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the graph feeding ``root`` in topological order.

    Every tensor appears once and after all of its inputs; only tensors on a
    ``requires_grad`` path are included.
    """
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# element-wise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data + c, (x,), lambda g: (g,), "shift")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "shift": shift,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch an element-wise primitive by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown element-wise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ContractError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# reductions


def _axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(_norm_axis(a, ndim) for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return axes if axes else tuple(range(ndim))


def sum_(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axes``; ``None`` or an empty list reduces every axis."""
    ax = _axes(axes, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax]))
    return scale(sum_(x, ax, keepdims), 1.0 / count)


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return sum_(x, axes, keepdims)
    if kind == "mean":
        return mean(x, axes, keepdims)
    raise ContractError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) > 1 or known == 0 or x.size % known:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(x: Tensor, a0: int = -2, a1: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    a0, a1 = _norm_axis(a0, x.ndim), _norm_axis(a1, x.ndim)
    axes[a0], axes[a1] = axes[a1], axes[a0]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty sequence")
    first = tensors[0]
    axis = _norm_axis(axis, first.ndim)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            s != u for i, (s, u) in enumerate(zip(t.shape, first.shape)) if i != axis
        ):
            raise ShapeError(f"concat: shapes {first.shape} and {t.shape} disagree off axis {axis}")
        if t.dtype != first.dtype:
            raise ContractError("concat: dtype mismatch")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slice_(x: Tensor, index) -> Tensor:
    """Basic indexing (ints, slices, Ellipsis); the gradient scatters back."""
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not (isinstance(i, (int, np.integer, slice)) or i is Ellipsis):
            raise ContractError(f"only basic indexing is differentiable, got {type(i).__name__}")
    out = x.data[index]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(out, (x,), backward, "slice")


def pad(x: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` is an int or one ``(before, after)`` pair per axis."""
    if isinstance(widths, int):
        widths = [(widths, widths)] * x.ndim
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim or any(v < 0 for w in widths for v in w):
        raise ShapeError(f"invalid pad widths {widths} for shape {x.shape}")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result(np.pad(x.data, widths), (x,), lambda g: (g[index],), "pad")


def flip(x: Tensor, axes) -> Tensor:
    axes = _axes(axes, x.ndim)
    out = np.flip(x.data, axes)
    return _result(out, (x,), lambda g: (np.flip(g, axes),), "flip")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules); gradients are summed."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot expand {x.shape} to {shape}") from None
    src = x.shape
    lead = len(shape) - len(src)
    stretched = tuple(lead + i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead)) + stretched, keepdims=True)
        return (g.reshape(src),)

    return _result(out, (x,), backward, "expand")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(_norm_axis(axis, t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis)
