"""Dense tensors with reverse-mode automatic differentiation.

Every primitive computes its forward value with numpy and registers a
closure mapping the output gradient to one gradient per input. Nodes get a
monotonically increasing id on creation, so a node's inputs always carry
smaller ids than the node itself and sorting by id is a valid topological
order for the backward sweep.

Broadcasting follows numpy's trailing-dimension alignment; the backward pass
sums gradients over broadcast axes.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_ids = itertools.count()
_default_dtype: type = np.float32

_DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = _resolve_dtype(dtype)


def _resolve_dtype(dtype) -> type:
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unknown precision {dtype!r}; expected one of {sorted(_DTYPES)}")
        return _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created leaves."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional array that remembers how it was computed.

    Leaves are created directly; interior nodes come from primitives. A node
    only keeps its inputs and backward closure when some input requires a
    gradient, so computations over frozen values build no graph at all.
    """

    __slots__ = ("data", "requires_grad", "name", "id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        dtype = _resolve_dtype(dtype) if dtype is not None else _default_dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype.type)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ops that only move values around cannot turn finite inputs non-finite
_STRUCTURAL = frozenset({"reshape", "transpose", "slice", "concat", "upsample"})


def _all_finite(data: np.ndarray) -> bool:
    # NaN and Inf propagate through a sum; the elementwise test only runs to rule out overflow of the sum itself
    return bool(np.isfinite(data.sum())) or bool(np.isfinite(data).all())


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent. Exposed so tests can register deliberately wrong rules.
    """
    if op not in _STRUCTURAL and not _all_finite(data):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.id = next(_ids)
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return apply_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar without creating a constant leaf."""
    return apply_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


# elementwise unary


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return apply_op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return apply_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly zero is 0
    mask = a.data > 0
    return apply_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        # row vector, as in numpy
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return apply_op(a.data @ b.data, (a, b), backward, "matmul")


def kronecker(a, b) -> Tensor:
    """Kronecker product of two matrices: block (i, j) of the result is a[i, j] * b."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kronecker: expected two matrices, got shapes {a.shape} and {b.shape}")
    p, q = a.shape
    r, s = b.shape
    out = np.einsum("ij,kl->ikjl", a.data, b.data).reshape(p * r, q * s)

    def backward(g):
        blocks = g.reshape(p, r, q, s)
        return (
            np.einsum("ikjl,kl->ij", blocks, b.data),
            np.einsum("ikjl,ij->kl", blocks, a.data),
        )

    return apply_op(out, (a, b), backward, "kronecker")


# reductions


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return apply_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return apply_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    if not _is_basic_index(index):
        raise ContractError("getitem supports integer, slice, None and Ellipsis indices only")
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    # basic indexing yields a view; values are never mutated in place once in a graph
    return apply_op(np.asarray(out), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return apply_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def upsample_nearest(a: Tensor, factor: int, axes: tuple[int, int] = (1, 2)) -> Tensor:
    """Nearest-neighbour upsampling of two spatial axes by an integer factor."""
    if factor < 1:
        raise ContractError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return a
    ax0, ax1 = sorted(ax % a.ndim for ax in axes)
    out = np.repeat(np.repeat(a.data, factor, axis=ax0), factor, axis=ax1)

    def backward(g):
        shape = list(a.shape)
        split = shape[:ax0] + [shape[ax0], factor] + shape[ax0 + 1 : ax1] + [shape[ax1], factor] + shape[ax1 + 1 :]
        return (g.reshape(split).sum(axis=(ax0 + 1, ax1 + 2)),)

    return apply_op(out, (a,), backward, "upsample")


# normalization and softmax


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    d = x.shape[-1]
    for p in (weight, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: parameter shape {p.shape} does not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    w = weight.data if weight is not None else 1.0
    out = xhat * w + (bias.data if bias is not None else 0.0)

    def backward(g):
        dxhat = g * w
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dw = _unbroadcast(g * xhat, (d,)) if weight is not None else None
        db = _unbroadcast(g, (d,)) if bias is not None else None
        return dx, dw, db

    parents = [x, weight if weight is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0)]
    return apply_op(out.astype(x.dtype, copy=False), parents, backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return apply_op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return apply_op(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),), "log_softmax")


# backward pass


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All gradient-carrying nodes reachable from ``root``, in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to its trainable leaves.

    Without ``params``, returns one entry per named leaf reachable from the
    loss. With ``params``, returns exactly those keys, filling zeros for
    leaves the loss does not depend on. The graph is left untouched, so
    several losses sharing one forward can be differentiated in turn.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[loss.id] = np.ones_like(loss.data)
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(node.id, None) if node._parents else grads.get(node.id)
        if g is None:
            continue
        if not node._parents:
            leaves[node.id] = node
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
    if params is None:
        return {(leaf.name or f"leaf{leaf.id}"): grads[i] for i, leaf in leaves.items()}
    return {name: grads.get(p.id, np.zeros_like(p.data)) for name, p in params.items()}


def flatten_grads(grads: dict[str, np.ndarray], names: Iterable[str]) -> np.ndarray:
    return np.concatenate([grads[n].reshape(-1) for n in names])


# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self) -> str:
        lines = [f"{e.name}: max_rel={e.max_rel_error:.3e} over {e.checked} entries {'ok' if e.passed else 'FAIL'}" for e in self.entries]
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``loss_fn`` rebuilds the graph from the current parameter values each
    call. Parameters must be 64-bit. When ``max_entries`` is given, that many
    coordinates per parameter are sampled instead of checking all of them.
    Relative error uses ``max(|analytic|, |numeric|, 1e-6)`` as denominator.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 parameters; {name} is {p.dtype}")
    analytic = backward(loss_fn(), params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            up = loss_fn().item()
            flat[idx] = original - step
            down = loss_fn().item()
            flat[idx] = original
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[idx]), numeric))
        report.entries.append(GradCheckEntry(name, worst, len(indices), worst <= tolerance))
    return report
