"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape: every operation returns a new `Tensor` that remembers its
parents and a backward closure.  `backward(loss)` walks the tape in reverse
topological order and accumulates gradients into every node that requires
them.  Leaves meant to be trained are wrapped in `Parameter`, which also
carries Adam state.

All values are float64 internally; any NaN/Inf produced by an operation
raises `NumericalOverflowError` immediately.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericalOverflowError

Array = np.ndarray

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _finite(data: Array) -> Array:
    if not np.all(np.isfinite(data)):
        raise NumericalOverflowError("numerical overflow")
    return data


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable[[Array], None] | None = None):
        self.data = _finite(np.asarray(data, dtype=np.float64))
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- graph plumbing -------------------------------------------------

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def const(x) -> Tensor:
    """Wrap a value as a non-trainable graph leaf."""
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: Array, parents: Sequence[Tensor],
            backward: Callable[[Array], None]) -> Tensor:
    """Create a graph node with an explicit backward closure.

    Used by modules that define linear operators with hand-written
    adjoints (bilinear upsampling, view back-projection).
    """
    return Tensor(data, _parents=tuple(parents), _backward=backward)


# -- arithmetic -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    out_data = a.data + b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    out_data = a.data - b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    out_data = a.data * b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def div(a, b) -> Tensor:
    a, b = const(a), const(b)
    out_data = a.data / b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out_data = a.data @ b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


# -- elementwise nonlinearities -------------------------------------------

def texp(a) -> Tensor:
    a = const(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bwd(g: Array) -> None:
        a._accum(g * out_data)

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def tlog(a) -> Tensor:
    a = const(a)
    out_data = np.log(a.data)

    def bwd(g: Array) -> None:
        a._accum(g / a.data)

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def tsqrt(a) -> Tensor:
    a = const(a)
    out_data = np.sqrt(a.data)

    def bwd(g: Array) -> None:
        a._accum(g * 0.5 / out_data)

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def power(a, p: float) -> Tensor:
    """a ** p for a constant exponent."""
    a = const(a)
    out_data = a.data ** p

    def bwd(g: Array) -> None:
        a._accum(g * p * a.data ** (p - 1.0))

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def sigmoid(a) -> Tensor:
    a = const(a)
    out_data = _stable_sigmoid(a.data)

    def bwd(g: Array) -> None:
        a._accum(g * out_data * (1.0 - out_data))

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = const(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g: Array) -> None:
        a._accum(g * _stable_sigmoid(a.data))

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def gelu(a) -> Tensor:
    """Exact GELU x * Phi(x) with the standard normal CDF via erf."""
    a = const(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out_data = a.data * cdf

    def bwd(g: Array) -> None:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        a._accum(g * (cdf + a.data * pdf))

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the un-clamped region."""
    a = const(a)
    out_data = np.clip(a.data, lo, hi)

    def bwd(g: Array) -> None:
        a._accum(g * ((a.data > lo) & (a.data < hi)))

    return Tensor(out_data, _parents=(a,), _backward=bwd)


# -- reductions and shape ops ----------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = const(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: Array) -> None:
        if axis is None:
            a._accum(np.full_like(a.data, float(g)))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = const(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def amax(a) -> Tensor:
    """Maximum over all entries; subgradient goes to the first argmax."""
    a = const(a)
    flat = a.data.ravel()
    idx = int(np.argmax(flat))
    out_data = np.asarray(flat[idx])

    def bwd(g: Array) -> None:
        ga = np.zeros_like(a.data)
        ga.ravel()[idx] = float(g)
        a._accum(ga)

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def reshape(a, shape) -> Tensor:
    a = const(a)
    out_data = a.data.reshape(shape)

    def bwd(g: Array) -> None:
        a._accum(g.reshape(a.data.shape))

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def slice0(a, i: int) -> Tensor:
    """Select index i along axis 0."""
    a = const(a)
    out_data = a.data[i]

    def bwd(g: Array) -> None:
        ga = np.zeros_like(a.data)
        ga[i] = g
        a._accum(ga)

    return Tensor(out_data, _parents=(a,), _backward=bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [const(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor(out_data, _parents=tuple(ts), _backward=bwd)


# -- backward pass ----------------------------------------------------------

def backward(loss: Tensor) -> float:
    """Reverse accumulation from a scalar objective.

    Gradients are added into `.grad` of every reachable node (so calling
    `backward` for several per-sample losses accumulates a batch gradient
    on shared leaves).  Returns the objective value.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar objective")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return float(loss.data)


def grad(loss: Tensor) -> float:
    """Alias of `backward`: populate gradients, return the objective value."""
    return backward(loss)


# -- parameters and Adam -----------------------------------------------------

class Parameter:
    """A trainable leaf tensor with Adam first/second moment state."""

    def __init__(self, values, name: str = ""):
        self.t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.t.data)
        self.v = np.zeros_like(self.t.data)
        self.step = 0

    @property
    def data(self) -> Array:
        return self.t.data

    @data.setter
    def data(self, values: Array) -> None:
        self.t.data = _finite(np.asarray(values, dtype=np.float64))

    @property
    def gradient(self) -> Array:
        return self.t.grad if self.t.grad is not None else np.zeros_like(self.t.data)

    def zero_grad(self) -> None:
        self.t.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name or '<unnamed>'}, shape={self.t.data.shape})"


def adam_step(param: Parameter, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; increments the step counter."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    g = param.gradient
    param.step += 1
    param.m = beta1 * param.m + (1.0 - beta1) * g
    param.v = beta2 * param.v + (1.0 - beta2) * (g * g)
    m_hat = param.m / (1.0 - beta1 ** param.step)
    v_hat = param.v / (1.0 - beta2 ** param.step)
    param.t.data = _finite(param.t.data - lr * m_hat / (np.sqrt(v_hat) + eps))


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# -- gradient checking --------------------------------------------------------

def check_gradients(build_loss: Callable[[], Tensor],
                    params: Sequence[Parameter],
                    rng: np.random.Generator,
                    coords_per_param: int = 6,
                    step: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    `build_loss` must construct a fresh tape from the current parameter
    values.  Returns the worst relative error over the sampled coordinates,
    where the relative error uses a 1e-6 floor so that near-zero gradients
    are compared absolutely.
    """
    zero_grads(params)
    backward(build_loss())
    analytic = [p.gradient.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        n = p.data.size
        k = min(coords_per_param, n)
        coords = rng.choice(n, size=k, replace=False)
        flat = p.t.data.ravel()
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(build_loss().data)
            flat[c] = orig - step
            f_minus = float(build_loss().data)
            flat[c] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            a = float(ana.ravel()[c])
            err = abs(a - num) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, err)
    zero_grads(params)
    return worst
