"""Dense tensors with define-by-run reverse-mode differentiation.

Every op on a :class:`Tensor` that requires a gradient records a node with a
monotonically increasing sequence number.  :func:`backward` collects the nodes
reachable from the loss and replays their adjoints in exact reverse execution
order, summing contributions into tensors consumed by several ops.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "no_grad",
    "precision",
    "debug_mode",
    "get_default_dtype",
    "set_default_dtype",
    "grad_check",
    "GradCheckReport",
    "NonFiniteError",
    "BackwardError",
    "NonDeterministicError",
]

_seq = itertools.count()
_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_debug = False


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


class BackwardError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for non-finite values while active."""
    global _debug
    old = _debug
    _debug = enabled
    try:
        yield
    finally:
        _debug = old


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_stochastic")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = _default_dtype if dtype is None else np.dtype(dtype)
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self._stochastic = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward_fn: Callable) -> "Tensor":
        if _debug and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {backward_fn.__qualname__.split('.')[0]}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._seq = next(_seq)
        out._stochastic = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    # -- properties -----------------------------------------------------------
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, inputs: Sequence["Tensor"] | None = None) -> None:
        backward(self, inputs)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def _bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), _bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def _bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), _bw)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def _bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), _bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def _bw(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data / b.data, (a, b), _bw)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        def _bw(g):
            return (-g,)

        return Tensor._make(-self.data, (self,), _bw)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self

        def _bw(g):
            return (g * exponent * x.data ** (exponent - 1),)

        return Tensor._make(self.data**exponent, (self,), _bw)

    def scale(self, factor: float) -> "Tensor":
        def _bw(g):
            return (g * factor,)

        return Tensor._make(self.data * self.data.dtype.type(factor), (self,), _bw)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, index):
        x = self

        def _bw(g):
            out = np.zeros_like(x.data)
            if _is_basic_index(index):
                out[index] += g
            else:
                np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.data[index], (self,), _bw)

    # -- shape ops -------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape

        def _bw(g):
            return (g.reshape(src),)

        return Tensor._make(self.data.reshape(shape), (self,), _bw)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))

        def _bw(g):
            return (g.transpose(inv),)

        return Tensor._make(self.data.transpose(axes), (self,), _bw)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        def _bw(g):
            return (np.swapaxes(g, a, b),)

        return Tensor._make(np.swapaxes(self.data, a, b), (self,), _bw)

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape) -> "Tensor":
        src = self.shape

        def _bw(g):
            return (_unbroadcast(g, src),)

        return Tensor._make(np.broadcast_to(self.data, shape).copy(), (self,), _bw)

    # -- reductions ------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), _bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / n)

    # -- elementwise functions ---------------------------------------------------
    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def _bw(g):
            return (g * out_data,)

        return Tensor._make(out_data, (self,), _bw)

    def log(self) -> "Tensor":
        x = self

        def _bw(g):
            return (g / x.data,)

        return Tensor._make(np.log(self.data), (self,), _bw)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def _bw(g):
            return (g * 0.5 / out_data,)

        return Tensor._make(out_data, (self,), _bw)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def _bw(g):
            return (g * (1.0 - out_data * out_data),)

        return Tensor._make(out_data, (self,), _bw)

    def abs(self) -> "Tensor":
        # subgradient 0 at exactly 0
        sign = np.sign(self.data)

        def _bw(g):
            return (g * sign,)

        return Tensor._make(np.abs(self.data), (self,), _bw)

    __abs__ = abs


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- linear algebra -----------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out_data, (a, b), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ValueError(f"invalid concat axis {axis} for {nd}-d tensors")
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(
                f"concat shape mismatch on axis {axis}: " + ", ".join(str(t.shape) for t in tensors)
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), _bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + tensors[0].ndim + 1
    expanded = [t.reshape(t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


# -- nonlinearities -------------------------------------------------------------------
_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(out_data, (x,), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), _bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def _bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out_data, (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an optional affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data if gain is not None else None
    out_data = xhat * gd if gd is not None else xhat
    if bias is not None:
        out_data = out_data + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def _bw(g):
        dxhat = g * gd if gd is not None else g
        gx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return Tensor._make(out_data, parents, _bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def _bw(g):
        return (g * keep,)

    out = Tensor._make(x.data * keep, (x,), _bw)
    out._stochastic = True
    return out


# -- reverse pass ----------------------------------------------------------------------
def _tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that take part in differentiation, in reverse execution order."""
    seen = {id(loss)}
    stack_ = [loss]
    nodes = []
    while stack_:
        node = stack_.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack_.append(p)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    return nodes


def _consumed(*_):
    raise BackwardError("graph already differentiated; run a new forward pass before calling backward again")


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Leaves listed in ``inputs`` that the loss does not reach get zero gradients.
    Gradients accumulate into existing ``.grad`` arrays; a graph can only be
    differentiated once.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss is detached: no input requires a gradient")
    if loss._backward is _consumed:
        _consumed()
    order = _tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is _consumed:
            _consumed()
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._backward = _consumed
    if inputs is not None:
        for leaf in inputs:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# -- gradient checking -------------------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: list
    numeric: list

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def _is_stochastic(root: Tensor) -> bool:
    seen = set()
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node._stochastic:
            return True
        for p in node._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack_.append(p)
    return False


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    step: float = 1e-4,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    The relative discrepancy of each component is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor = 1e-4 * max|n|`` keeps components that are numerically zero
    from dominating the report.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-6, 1e-3], got {step}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    if _is_stochastic(out):
        raise NonDeterministicError("function contains stochastic ops (dropout in training mode)")
    backward(out, inputs=xs)
    analytic = [t.grad.copy() for t in xs]

    numeric = []
    with no_grad():
        for t in xs:
            num = np.zeros_like(t.data, dtype=np.float64)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*xs).data)
                flat[i] = orig - step
                fm = float(f(*xs).data)
                flat[i] = orig
                num.reshape(-1)[i] = (fp - fm) / (2 * step)
            numeric.append(num)

    scale = max((np.abs(n).max() if n.size else 0.0) for n in numeric)
    floor = max(1e-4 * scale, 1e-12)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return GradCheckReport(worst, tol, analytic, numeric)
