"""Dense float64 tensors with a reverse-mode tape.

Each op computes its result eagerly with numpy and, when gradients are
enabled and some input requires them, records a closure mapping the output
gradient to input gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates ``.grad`` on leaf tensors.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from calico.errors import DimensionError, NonFiniteError

_state = threading.local()

# op name -> multiplier applied to that op's input gradients (test hook)
_corrupted: dict[str, float] = {}


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the backward pass of ``op`` by ``factor``; used to prove grad checks bite."""
    _corrupted[op] = factor
    try:
        yield
    finally:
        _corrupted.pop(op, None)


class FlopCount:
    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCount]:
    """Count 2*mult-adds of every matmul executed inside the block."""
    counter = FlopCount()
    stack = getattr(_state, "flops", None)
    if stack is None:
        stack = _state.flops = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _record_flops(n: int) -> None:
    stack = getattr(_state, "flops", None)
    if stack:
        for counter in stack:
            counter.add(n)


def _check_finite(data: np.ndarray, op: str) -> None:
    # a sum of squares is non-finite whenever an element is; only then pay for the
    # full scan, which also clears sums that merely overflowed
    flat = data.reshape(-1)
    total = float(flat.dot(flat))
    if total - total != 0.0 and not np.isfinite(data).all():
        raise NonFiniteError(op)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str,
                check: bool = True) -> "Tensor":
        # ops that only rearrange already-checked elements pass check=False
        if check:
            _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            factor = _corrupted.get(node.op)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

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

    @property
    def T(self):
        return swap_last(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad ** exponent

    def backward(g):
        return (g * exponent * ad ** (exponent - 1),)

    return Tensor._result(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._result(out, (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return Tensor._result(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU (smooth everywhere, so grad checks stay clean)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), backward, "gelu")


# -- reductions and shape ops ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    n = a.data.ndim
    axes = tuple(ax % n for ax in axes)
    inverse = [0] * n
    for i, ax in enumerate(axes):
        inverse[ax] = i
    out = a.data.transpose(axes)
    return Tensor._result(out, (a,), lambda g: (g.transpose(inverse),), "transpose", check=False)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = np.array(a.data[index], dtype=np.float64)

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, index, g)
        return (z,)

    return Tensor._result(out, (a,), backward, "getitem", check=False)


def index_add(a: Tensor, index, values) -> Tensor:
    """Copy of ``a`` with ``values`` added at rows ``index`` (axis 0)."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    expected = (len(index),) + a.shape[1:]
    if values.shape != expected:
        raise DimensionError(f"index_add: values shape {values.shape} != {expected}")
    out = a.data.copy()
    np.add.at(out, index, values.data)
    return Tensor._result(out, (a, values), lambda g: (g, g[index]), "index_add")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat", check=False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    m, k, n = ad.shape[-2], ad.shape[-1], bd.shape[-1]
    _record_flops(2 * k * out.size)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(out, (a, b), backward, "matmul")


def linear(x, w, b) -> Tensor:
    """x @ w + b as one tape node; w is (D_in, D_out), b is (D_out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim < 1 or w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape}, {w.shape}, {b.shape} are not aligned")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data
    _record_flops(2 * wd.shape[0] * out.size)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        return g @ wd.T, gw, g2.sum(axis=0)

    return Tensor._result(out, (x, w, b), backward, "linear")


# -- normalisation --------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"log_softmax: empty axis {axis} for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain, bias, eps: float = 1e-5) -> Tensor:
    gain, bias = as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last extent {d} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), backward, "layer_norm")
