"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the data; the gradient rules, the tape, and the finite-difference
checker live here. Tensors default to float32; float64 is used for oracle-grade
gradient checks. Every op validates shapes up front and checks its output for
NaN/Inf, so training failures surface at the op that produced them instead of
three modules later.

Broadcasting is deliberately one-sided: in a binary op, one operand must be
expandable to the other's shape by left-padding with 1s and stretching size-1
axes. Two-sided broadcasts like (l,1)*(1,d) are shape errors; write the outer
product as a matmul.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DetachedLoss,
    EmptyReduction,
    NonDeterministicF,
    NonFiniteResult,
    NotScalar,
    ShapeMismatch,
)

DEFAULT_DTYPE = np.float32

# Large-negative sentinel for masked logits (float32-safe; exp() underflows to 0).
MASK_VALUE = -3.4e38

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher paths, decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteResult(f"{op} produced NaN/Inf")


class Tensor:
    """A dense array plus optional participation in the gradient tape.

    Leaves created with requires_grad=True get a zero-filled .grad immediately;
    backpropagate() accumulates into it, so leaves not upstream of the loss
    keep an exactly-zero gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- bookkeeping ------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), requires_grad=False)
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            src_dtype = self.dtype

            def _bw(g):
                _accum(self, g.astype(src_dtype))

            out._backward = _bw
        return out

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # intermediates get grads lazily during backward
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- broadcasting (one-sided) ------------------------------------------------


def _broadcast_shapes(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    """Return the output shape if one side expands to the other, else raise."""
    if a == b:
        return a

    def expands_to(small, big):
        if len(small) > len(big):
            return False
        pad = (1,) * (len(big) - len(small)) + tuple(small)
        return all(s == t or s == 1 for s, t in zip(pad, big))

    if expands_to(b, a):
        return a
    if expands_to(a, b):
        return b
    raise ShapeMismatch(f"{op}: cannot broadcast {a} with {b} (one-sided only)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce an upstream gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce_pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype != b.dtype:
        # python-scalar promotion only; deliberate f32/f64 mixes are errors
        if a.size == 1 and not a.requires_grad and not a._parents:
            a = Tensor(a.data, dtype=b.dtype)
        elif b.size == 1 and not b.requires_grad and not b._parents:
            b = Tensor(b.data, dtype=a.dtype)
        else:
            raise ShapeMismatch(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    return a, b


# -- elementwise binary ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    _broadcast_shapes(a.shape, b.shape, "add")
    with np.errstate(over="ignore"):
        data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    _broadcast_shapes(a.shape, b.shape, "sub")
    with np.errstate(over="ignore"):
        data = a.data - b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    _broadcast_shapes(a.shape, b.shape, "mul")
    with np.errstate(over="ignore"):
        data = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "div")
    _broadcast_shapes(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), _bw, "div")


def matmul(a, b) -> Tensor:
    """Batched matmul contracting the last axis of a with the second-to-last
    of b. Leading batch dims must match or be one-sided broadcastable."""
    a, b = _coerce_pair(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} @ {b.shape}")
    _broadcast_shapes(a.shape[:-2], b.shape[:-2], "matmul")
    with np.errstate(over="ignore", invalid="ignore"):
        data = np.matmul(a.data, b.data)

    def _bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), _bw, "matmul")


# -- elementwise unary ops ----------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def _bw(g):
        _accum(a, g * data)

    return _make(data, (a,), _bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def _bw(g):
        _accum(a, g / a.data)

    return _make(data, (a,), _bw, "log")


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a scalar exponent (covers sqrt / rsqrt)."""
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data ** p

    def _bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), _bw, "power")


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def _bw(g):
        _accum(a, g * (a.data > 0))

    return _make(data, (a,), _bw, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def _bw(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), _bw, "sigmoid")


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax (max subtraction always applied)."""
    a = as_tensor(a)
    if a.shape == () or a.shape[axis] == 0:
        raise EmptyReduction("softmax over empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _make(data, (a,), _bw, "softmax")


# -- reductions ----------------------------------------------------------------


def _norm_axis(a: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(a.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % a.ndim for ax in axis)


def _check_nonempty(a: Tensor, axes: tuple[int, ...], op: str) -> None:
    for ax in axes:
        if a.shape[ax] == 0:
            raise EmptyReduction(f"{op} over empty axis {ax} of shape {a.shape}")
    if a.ndim == 0 and a.size == 0:  # pragma: no cover - defensive
        raise EmptyReduction(op)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(a, axis)
    _check_nonempty(a, axes, "sum")
    data = a.data.sum(axis=axes or None, keepdims=keepdims)

    def _bw(g):
        gg = g
        if not keepdims and axes:
            gg = np.expand_dims(gg, axes)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.asarray(data, dtype=a.dtype), (a,), _bw, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(a, axis)
    _check_nonempty(a, axes, "mean")
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else a.size
    data = a.data.mean(axis=axes or None, keepdims=keepdims)

    def _bw(g):
        gg = g / count
        if not keepdims and axes:
            gg = np.expand_dims(gg, axes)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.asarray(data, dtype=a.dtype), (a,), _bw, "mean")


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max over one axis (or all); backward routes to the first argmax."""
    a = as_tensor(a)
    axes = _norm_axis(a, axis)
    if axis is not None and len(axes) != 1:
        raise ShapeMismatch("max supports a single axis or axis=None")
    _check_nonempty(a, axes, "max")
    data = a.data.max(axis=axes[0] if axis is not None else None, keepdims=True)

    def _bw(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes) if axis is not None else np.asarray(g).reshape((1,) * a.ndim)
        hit = a.data == data
        if axis is not None:
            first = np.cumsum(hit, axis=axes[0]) == 1
        else:
            first = (np.cumsum(hit.reshape(-1)) == 1).reshape(a.shape)
        _accum(a, np.broadcast_to(gg, a.shape) * (hit & first))

    if keepdims:
        out = data
    elif axis is None:
        out = data.reshape(())
    else:
        out = np.squeeze(data, axis=axes[0])
    return _make(np.asarray(out, dtype=a.dtype), (a,), _bw, "max")


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    data = np.cumsum(a.data, axis=ax)

    def _bw(g):
        _accum(a, np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax))

    return _make(data.astype(a.dtype), (a,), _bw, "cumsum")


# -- shape ops -------------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def _bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), _bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def _bw(g):
        _accum(a, g.transpose(inv))

    return _make(data, (a,), _bw, "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def _bw(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _make(data, (a,), _bw, "swapaxes")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    ax = axis % parts[0].ndim
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(o != b for i, (o, b) in enumerate(zip(other, base)) if i != ax):
            raise ShapeMismatch(f"concat: {parts[0].shape} vs {p.shape} on axis {ax}")
    data = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]

    def _bw(g):
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(offset, offset + s)
                _accum(p, g[tuple(sl)])
            offset += s

    return _make(data, parts, _bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    """Stack along a new axis (concat of unsqueezed parts)."""
    unsq = []
    for t in tensors:
        t = as_tensor(t)
        ax = axis % (t.ndim + 1)
        unsq.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(unsq, axis=axis)


def narrow(a, key) -> Tensor:
    """Basic slicing with gradient support (ints, slices, tuples thereof)."""
    a = as_tensor(a)
    data = a.data[key]

    def _bw(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        _accum(a, buf)

    return _make(data.copy(), (a,), _bw, "slice")


def pad_axis(a, axis: int, before: int, after: int, value: float = 0.0) -> Tensor:
    """Constant-pad one axis."""
    a = as_tensor(a)
    ax = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[ax] = (before, after)
    data = np.pad(a.data, widths, constant_values=value)

    def _bw(g):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(before, before + a.shape[ax])
        _accum(a, g[tuple(sl)])

    return _make(data, (a,), _bw, "pad")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with a constant (mask not differentiable)."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def _bw(g):
        _accum(a, np.where(mask, 0.0, g))

    return _make(data, (a,), _bw, "masked_fill")


def embedding(weight, ids: np.ndarray) -> Tensor:
    """Row gather from weight [vocab, dim] by integer ids [...]."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    data = weight.data[ids]

    def _bw(g):
        buf = np.zeros_like(weight.data)
        np.add.at(buf, ids, g)
        _accum(weight, buf)

    return _make(data, (weight,), _bw, "embedding")


def take_along_last(a, idx: np.ndarray) -> Tensor:
    """Gather one entry per row along the last axis (cross-entropy target pick)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeMismatch(f"take_along_last: idx {idx.shape} vs {a.shape}")
    expanded = np.expand_dims(idx, -1)
    data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def _bw(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, expanded, np.expand_dims(g, -1), axis=-1)
        _accum(a, buf)

    return _make(data, (a,), _bw, "take_along_last")


# -- generic dispatch ---------------------------------------------------------------

OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "power": power,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "max": reduce_max,
    "cumsum": cumsum,
    "reshape": reshape,
    "transpose": transpose,
    "swapaxes": swapaxes,
    "concat": concat,
    "stack": stack,
    "slice": narrow,
    "pad": pad_axis,
    "masked_fill": masked_fill,
    "embedding": embedding,
    "take_along_last": take_along_last,
}


def evaluate(op_kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Generic op dispatch: evaluate("softmax", [x], {"axis": -1}).

    concat/stack take their operand list as one argument; everything else is
    applied positionally.
    """
    if op_kind not in OPS:
        raise ShapeMismatch(f"unknown op {op_kind!r}; known: {sorted(OPS)}")
    fn = OPS[op_kind]
    attrs = attrs or {}
    if op_kind in ("concat", "stack"):
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# -- tape / backward --------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """All tape nodes reachable from root, parents before children."""
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


def backpropagate(loss: Tensor) -> None:
    """Fill .grad of every requires_grad leaf upstream of a scalar loss."""
    if loss.data.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedLoss("loss is not on an active tape")
    order = topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if not node.is_leaf():
                node.grad = None  # free intermediate grads as we go


# -- gradient checking --------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic Tensor -> scalar map; the check runs in float64.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ValueError(f"h={h} outside [1e-5, 1e-3]")
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    probe = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    y1 = f(probe)
    y2 = f(Tensor(x0.copy(), requires_grad=True, dtype=np.float64))
    if y1.data != y2.data:
        raise NonDeterministicF("two evaluations at the same point differ")
    backpropagate(y1)
    analytic = probe.grad.copy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0.copy(), dtype=np.float64)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0.copy(), dtype=np.float64)).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max())


def grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))
