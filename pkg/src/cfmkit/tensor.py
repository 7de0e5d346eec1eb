"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation checks its result for NaN/Inf and, when grad
tracking is enabled and any input requires a gradient, appends a node to the
active :class:`Tape`. :func:`backward` walks the tape in reverse.

Grad tracking is switched off inside :func:`no_grad`; this is how
stop-gradient evaluations are produced (they never touch the tape).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_GELU_K = np.sqrt(2.0 / np.pi)

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """A dense float64 array, optionally a leaf that receives gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list[_Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor, retain_tape: bool = False) -> dict[Tensor, np.ndarray]:
        return backward(loss, self, retain_tape)


def current_tape() -> Tape:
    tp = _active_tape.get()
    if tp is None:
        tp = Tape()
        _active_tape.set(tp)
    return tp


@contextlib.contextmanager
def tape() -> Iterator[Tape]:
    """Open a fresh tape for the duration of the block."""
    tp = Tape()
    token = _active_tape.set(tp)
    try:
        yield tp
    finally:
        _active_tape.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _emit(arr: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    _check_finite(arr, op)
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, track)
    if track:
        current_tape().nodes.append(_Node(out, parents, bwd, op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    # Only trailing bias vectors, per-row (B, 1) columns and scalars broadcast.
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    return shape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), bwd, "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "subtract")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), bwd, "subtract")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "multiply")

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), bwd, "multiply")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,), "scale")


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        d = 0.5 / out
        _check_finite(d, "sqrt backward")
        return (g * d,)

    return _emit(out, (a,), bwd, "sqrt")


def absolute(a: Tensor) -> Tensor:
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(k (x + 0.044715 x^3)))."""
    x = a.data
    th = np.tanh(_GELU_K * (x + 0.044715 * x * x * x))
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _emit(out, (a,), bwd, "gelu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _emit(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"gelu": gelu, "tanh": tanh, "leaky_relu": leaky_relu}


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(a.data @ b.data, (a, b), bwd, "matmul")


def affine(x, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias, with bias of shape (out,)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: x {x.shape}, weight {weight.shape}, bias {bias.shape}")

    def bwd(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit(x.data @ weight.data + bias.data, (x, weight, bias), bwd, "affine")


def concatenate(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise DimensionError("concatenate: no inputs")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, parts, bwd, "concatenate")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), bwd, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = np.mean(a.data, axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), bwd, "mean")


def l2_norm_squared(a: Tensor) -> Tensor:
    """Per-row squared Euclidean norm over the last axis."""
    a = as_tensor(a)
    out = np.sum(a.data * a.data, axis=-1)
    return _emit(out, (a,), lambda g: (2.0 * a.data * g[..., None],), "l2_norm_squared")


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "affine": affine,
    "tanh": tanh,
    "gelu": gelu,
    "leaky_relu": leaky_relu,
    "sum": sum,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "abs": absolute,
    "concatenate": lambda *xs, axis=-1: concatenate(xs, axis=axis),
    "scale": scale,
    "l2_norm_squared": l2_norm_squared,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name (used by the gradient checker)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- reverse mode


def backward(loss: Tensor, tp: Tape | None = None, retain_tape: bool = False) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf of the tape and return the gradient map.

    Leaves that do not influence ``loss`` get zero gradients. The tape is
    cleared afterwards unless ``retain_tape`` is set.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tp = tp if tp is not None else current_tape()

    produced = {id(n.out) for n in tp.nodes}
    leaves: dict[int, Tensor] = {}
    for node in tp.nodes:
        for p in node.parents:
            if p.requires_grad and id(p) not in produced:
                leaves[id(p)] = p
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(tp.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        _check_finite(g, "backward")
        leaf.grad = g
        result[leaf] = g
    if not retain_tape:
        tp.clear()
    return result
