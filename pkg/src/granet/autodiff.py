"""Dense float64 arrays with reverse-mode differentiation.

Every learned computation in granet flows through :class:`Tensor`. Each
primitive below computes its forward value with numpy and, when any input
requires a gradient, attaches a closure that maps the output gradient to
input gradients. :func:`backward` replays those closures over a
:class:`ComputationRecord` in reverse topological order.

Broadcasting is deliberately absent apart from :func:`add_bias`,
:func:`scale_rows` and :func:`scale_cols`; everything else demands exactly
matching shapes.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = threading.local()

# sigmoid saturates at these instead of reaching 0.0 / 1.0 exactly
_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - np.finfo(np.float64).epsneg


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.shape), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value):
        return Tensor(np.full(shape, float(value)))
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input values")


# --------------------------------------------------------------------------
# record + backward


@dataclass
class RecordEntry:
    op: str
    inputs: tuple
    output: int


@dataclass
class ComputationRecord:
    """Primitive applications reachable from one output, inputs before consumers."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def entries(self) -> list:
        return [RecordEntry(n._op, tuple(id(p) for p in n._parents), id(n)) for n in self.nodes]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto existing ``.grad`` buffers so several losses can be
    accumulated before an optimizer step.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    record = ComputationRecord.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    owned: set = set()  # buffers created here, safe to add into in place
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in owned:
                grads[key] += pg
            elif key in grads:
                grads[key] = grads[key] + pg
                owned.add(key)
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# linear algebra + elementwise


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _result(A @ B, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(t.data * c, (t,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def scale_rows(x: Tensor, a: Tensor) -> Tensor:
    """Multiply row i of an N x C tensor by a[i]."""
    if x.ndim != 2 or a.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows: scalars {a.shape} do not fit rows of {x.shape}")
    X, s = x.data, a.data

    def bw(g):
        return g * s[:, None], np.einsum("ij,ij->i", g, X)

    return _result(X * s[:, None], (x, a), bw, "scale_rows")


def scale_cols(x: Tensor, a: Tensor) -> Tensor:
    """Multiply column j of an N x C tensor by a[j]."""
    if x.ndim != 2 or a.shape != (x.shape[1],):
        raise DimensionError(f"scale_cols: scalars {a.shape} do not fit columns of {x.shape}")
    X, s = x.data, a.data

    def bw(g):
        return g * s[None, :], np.einsum("ij,ij->j", g, X)

    return _result(X * s[None, :], (x, a), bw, "scale_cols")


# --------------------------------------------------------------------------
# activations


def relu(t: Tensor) -> Tensor:
    _check_finite(t.data, "relu")
    X = t.data
    return _result(np.maximum(X, 0.0), (t,), lambda g: (g * (X > 0),), "relu")


def sigmoid(t: Tensor) -> Tensor:
    _check_finite(t.data, "sigmoid")
    X = t.data
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _SIG_LO, _SIG_HI, out=out)
    return _result(out, (t,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _axis(t: Tensor, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ContractError(f"axis {axis} out of range for rank {t.ndim}")
    return axis % t.ndim


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(t, axis)
    _check_finite(t.data, "softmax")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (t,), bw, "softmax")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(t, axis)
    _check_finite(t.data, "log_softmax")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (t,), bw, "log_softmax")


# --------------------------------------------------------------------------
# structural


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    old = t.shape
    try:
        data = t.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(data, (t,), lambda g: (g.reshape(old),), "reshape")


def transpose(t: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(t.data.transpose(axes), (t,), lambda g: (g.transpose(inverse),), "transpose")


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(ts)
    if not ts:
        raise ContractError("concat needs at least one tensor")
    axis = _axis(ts[0], axis)
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[k] != ref[k] for k in range(len(ref)) if k != axis):
            raise DimensionError(f"concat: {t.shape} does not match {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def max_pool(t: Tensor, axis: int = -1) -> Tensor:
    """Reduce by max over ``axis``; the gradient goes to the first argmax."""
    axis = _axis(t, axis)
    X = t.data
    idx = np.expand_dims(np.argmax(X, axis=axis), axis)
    out = np.take_along_axis(X, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(X)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (t,), bw, "max_pool")


def sum(t: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = t.shape
    if axis is None:
        return _result(np.asarray(t.data.sum()), (t,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = _axis(t, axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(t.data.sum(axis=axis), (t,), bw, "sum")


def mean(t: Tensor) -> Tensor:
    return scale(sum(t), 1.0 / t.size)


def gather(t: Tensor, index) -> Tensor:
    """Rows of ``t`` picked by an integer array: out[...] = t[index[...]]."""
    index = np.asarray(index, dtype=np.intp)
    n = t.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ContractError(f"gather: index out of range for {n} rows")
    X = t.data

    def bw(g):
        full = np.zeros_like(X)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + X.shape[1:]))
        return (full,)

    return _result(X[index], (t,), bw, "gather")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    running: Optional[tuple] = None,
):
    """Normalize each column of a P x d tensor.

    With ``running=None`` the batch statistics are used (training) and the
    return value is ``(out, batch_mean, batch_var)``. Otherwise ``running``
    holds stored ``(mean, var)`` treated as constants.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    X = x.data
    G = gamma.data
    if running is None:
        P = X.shape[0]
        if P < 2:
            raise ContractError("batch_norm: a batch of one position has degenerate variance")
        mu = X.mean(axis=0)
        var = X.var(axis=0)
    else:
        mu, var = running
        P = None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    out = xhat * G + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * G
        if P is None:
            dx = dxhat * inv
        else:
            dx = (inv / P) * (P * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    res = _result(out, (x, gamma, beta), bw, "batch_norm")
    if running is None:
        return res, mu, var
    return res


# --------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """Compare analytic and central-difference gradients of scalar ``f`` at ``x``.

    Returns max |analytic - numeric| / max(1, |numeric|) over the checked
    coordinates (all of them unless ``indices`` names flat positions).
    ``x`` is perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if not x.requires_grad:
        raise ContractError("finite_diff_check: x must require grad")
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = f(x).item()
        flat[i] = orig - eps
        with no_grad():
            fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
