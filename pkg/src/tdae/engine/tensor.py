"""Dense tensors with a reverse-mode differentiation tape.

Values are numpy arrays, row-major, float32 or float64. Tensors never
mutate after construction; every operation returns a fresh tensor.
Operations record onto the active ``Tape`` only when at least one input
is gradient-tracked, so plain forward evaluation carries no tape cost.

Backward rules live in the ``VJP_RULES`` registry keyed by operation
name, which keeps the tape itself a dumb ordered list and lets tests
swap a rule out to prove the gradient checker catches corruption.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from ..errors import ContractError, DimensionError, ParameterError

__all__ = [
    "Tape",
    "Tensor",
    "VJP_RULES",
    "backward",
    "concat",
    "gelu",
    "layer_norm",
    "log_softmax",
    "matmul",
    "relu",
    "softmax",
]

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tensor:
    """Immutable dense array plus optional gradient slot and tape node id."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Takes ownership of a freshly computed array; no defensive copy.
        arr = np.ascontiguousarray(arr)
        try:
            arr.flags.writeable = False
        except ValueError:
            arr = arr.copy()
            arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.node = None
        t.requires_grad = False
        return t

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    # arithmetic sugar; every path goes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(self, other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(self, other))

    def __rtruediv__(self, other):
        return div(_coerce(self, other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def permute(self, axes) -> "Tensor":
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("op", "parents", "saved", "out_shape", "tensor")

    def __init__(self, op, parents, saved, out_shape, tensor=None):
        self.op = op
        self.parents = parents
        self.saved = saved
        self.out_shape = out_shape
        # every node pins its output tensor: _ids is keyed by id(), so a
        # registered tensor must outlive the tape or a new allocation could
        # reuse its address and silently alias a stale node
        self.tensor = tensor


class Tape:
    """Append-only record of operations, topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.tape = self._prev
        del self._prev

    def watch(self, t: Tensor) -> int:
        """Register a leaf tensor; idempotent per tape."""
        idx = self._ids.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node("leaf", (), (), t.data.shape, tensor=t))
            self._ids[id(t)] = idx
            t.node = idx
        return idx

    def _add(self, op, parents, saved, tensor) -> int:
        idx = len(self.nodes)
        self.nodes.append(_Node(op, parents, saved, tensor.data.shape, tensor=tensor))
        self._ids[id(tensor)] = idx
        return idx

    def __len__(self) -> int:
        return len(self.nodes)


def _apply(op: str, out: np.ndarray, parents: Sequence[Tensor], saved: tuple) -> Tensor:
    tape = _active_tape()
    result = Tensor._wrap(out)
    if tape is None:
        return result
    pids: list[int | None] = []
    tracked = False
    for p in parents:
        pid = tape._ids.get(id(p))
        if pid is None and p.requires_grad:
            pid = tape.watch(p)
        pids.append(pid)
        tracked = tracked or pid is not None
    if not tracked:
        return result
    result.requires_grad = True
    result.node = tape._add(op, tuple(pids), saved, result)
    return result


# --------------------------------------------------------------------------
# backward rules

VJP_RULES: dict[str, Callable] = {}


def _rule(name: str):
    def deco(fn):
        VJP_RULES[name] = fn
        return fn

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _spread(g: np.ndarray, in_shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep over the tape; visits each node exactly once.

    Populates ``.grad`` on every leaf reached from ``loss`` and on every
    tensor in ``params`` (zeros when unused). Returns a tensor->array map.
    """
    if loss.node is None or tape._ids.get(id(loss)) != loss.node:
        raise ContractError("loss tensor was not produced on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    adjoint: list[np.ndarray | None] = [None] * len(tape.nodes)
    adjoint[loss.node] = np.ones_like(loss.data)
    for idx in range(len(tape.nodes) - 1, -1, -1):
        g = adjoint[idx]
        node = tape.nodes[idx]
        if g is None or node.op == "leaf":
            continue
        grads = VJP_RULES[node.op](node.saved, g)
        for pid, gp in zip(node.parents, grads):
            if pid is None or gp is None:
                continue
            adjoint[pid] = gp if adjoint[pid] is None else adjoint[pid] + gp
    out: dict[Tensor, np.ndarray] = {}
    for idx, node in enumerate(tape.nodes):
        if node.op != "leaf":
            continue
        t = node.tensor
        g = adjoint[idx]
        t.grad = np.zeros_like(t.data) if g is None else np.array(g, copy=True)
        out[t] = t.grad
    if params is not None:
        for p in params:
            if p not in out:
                p.grad = np.zeros_like(p.data)
                out[p] = p.grad
    return out


# --------------------------------------------------------------------------
# elementwise and structural operations

def _coerce(ref: Tensor, value) -> Tensor:
    if isinstance(value, Tensor):
        if value.dtype != ref.dtype:
            raise ParameterError(
                f"mixed dtypes {ref.data.dtype.name} and {value.data.dtype.name}"
            )
        return value
    return Tensor(np.asarray(value), dtype=ref.dtype)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_broadcast(a, b)
    return _apply("add", a.data + b.data, (a, b), (a.shape, b.shape))


@_rule("add")
def _vjp_add(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_broadcast(a, b)
    return _apply("sub", a.data - b.data, (a, b), (a.shape, b.shape))


@_rule("sub")
def _vjp_sub(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_broadcast(a, b)
    return _apply("mul", a.data * b.data, (a, b), (a.data, b.data))


@_rule("mul")
def _vjp_mul(saved, g):
    da, db = saved
    return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_broadcast(a, b)
    return _apply("div", a.data / b.data, (a, b), (a.data, b.data))


@_rule("div")
def _vjp_div(saved, g):
    da, db = saved
    return (
        _unbroadcast(g / db, da.shape),
        _unbroadcast(-g * da / (db * db), db.shape),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return _apply("scale", a.data * a.dtype.type(s), (a,), (a.dtype.type(s),))


@_rule("scale")
def _vjp_scale(saved, g):
    (s,) = saved
    return (g * s,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 or batched rank-3 operands."""
    if not isinstance(b, Tensor):
        raise ParameterError("matmul needs two tensors")
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul supports rank 2 or 3, got {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ParameterError(f"mixed dtypes {a.data.dtype.name} and {b.data.dtype.name}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    return _apply("matmul", np.matmul(a.data, b.data), (a, b), (a.data, b.data))


@_rule("matmul")
def _vjp_matmul(saved, g):
    da, db = saved
    ga = np.matmul(g, np.swapaxes(db, -1, -2))
    gb = np.matmul(np.swapaxes(da, -1, -2), g)
    return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ParameterError(f"{op} axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    ax = _norm_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    return _apply("softmax", y, (x,), (y, ax))


@_rule("softmax")
def _vjp_softmax(saved, g):
    y, ax = saved
    return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "log_softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    return _apply("log_softmax", out, (x,), (np.exp(out), ax))


@_rule("log_softmax")
def _vjp_log_softmax(saved, g):
    p, ax = saved
    return (g - p * g.sum(axis=ax, keepdims=True),)


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _apply("exp", y, (x,), (y,))


@_rule("exp")
def _vjp_exp(saved, g):
    (y,) = saved
    return (g * y,)


def tlog(x: Tensor) -> Tensor:
    return _apply("log", np.log(x.data), (x,), (x.data,))


@_rule("log")
def _vjp_log(saved, g):
    (xd,) = saved
    return (g / xd,)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.data.dtype)
    return _apply("relu", x.data * mask, (x,), (mask,))


@_rule("relu")
def _vjp_relu(saved, g):
    (mask,) = saved
    return (g * mask,)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    xd = x.data
    y = 0.5 * xd * (1.0 + erf(xd * _INV_SQRT2))
    return _apply("gelu", y.astype(xd.dtype, copy=False), (x,), (xd,))


@_rule("gelu")
def _vjp_gelu(saved, g):
    (xd,) = saved
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
    return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _apply("reshape", out, (x,), (x.shape,))


@_rule("reshape")
def _vjp_reshape(saved, g):
    (in_shape,) = saved
    return (g.reshape(in_shape),)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute axes {axes} are not a permutation of rank {x.ndim}")
    return _apply("permute", x.data.transpose(axes), (x,), (axes,))


@_rule("permute")
def _vjp_permute(saved, g):
    (axes,) = saved
    inverse = np.argsort(axes)
    return (g.transpose(inverse),)


def _norm_reduce_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_reduce_axis(axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)
    return _apply("sum", out, (x,), (x.shape, ax, keepdims))


@_rule("sum")
def _vjp_sum(saved, g):
    in_shape, ax, keepdims = saved
    return (_spread(g, in_shape, ax, keepdims),)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_reduce_axis(axis, x.ndim)
    out = x.data.mean(axis=ax, keepdims=keepdims)
    count = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    return _apply("mean", out, (x,), (x.shape, ax, keepdims, count))


@_rule("mean")
def _vjp_mean(saved, g):
    in_shape, ax, keepdims, count = saved
    return (_spread(g, in_shape, ax, keepdims) / count,)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    ax = _norm_axis(axis, tensors[0].ndim, "concat")
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dtype:
            raise ParameterError("concat operands must share dtype")
        if t.ndim != tensors[0].ndim:
            raise DimensionError("concat operands must share rank")
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise DimensionError(
            f"concat shapes {[t.shape for t in tensors]} disagree off axis {ax}"
        ) from None
    sizes = tuple(t.shape[ax] for t in tensors)
    return _apply("concat", out, tuple(tensors), (ax, sizes))


@_rule("concat")
def _vjp_concat(saved, g):
    ax, sizes = saved
    splits = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
    return tuple(splits)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    return _apply("layer_norm", out, (x, gamma, beta), (xhat, inv_std, gamma.data))


@_rule("layer_norm")
def _vjp_layer_norm(saved, g):
    xhat, inv_std, gamma = saved
    reduce_axes = tuple(range(g.ndim - 1))
    dbeta = g.sum(axis=reduce_axes)
    dgamma = (g * xhat).sum(axis=reduce_axes)
    gy = g * gamma
    dx = inv_std * (
        gy
        - gy.mean(axis=-1, keepdims=True)
        - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta
