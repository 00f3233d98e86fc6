"""Dense float tensors with reverse-mode automatic differentiation.

The engine is a thin tape over numpy: every operation that touches a
gradient-tracking tensor records its parents and a local backward rule on
the result node. ``backward`` on a scalar walks the recorded graph once in
reverse topological order and accumulates gradients additively into every
reachable leaf. Gradients keep accumulating until ``zero_grad`` is called,
which is the contract the optimizer loop relies on.

Conventions fixed here and asserted by the test suite:

* default dtype is float64; float32 is opt-in for training speed,
* one dtype per operation (mixing raises ``ShapeError``),
* broadcasting follows numpy's trailing-dimension rules and backward sums
  gradients over broadcast axes,
* ``relu`` uses derivative 0 at exactly 0,
* ``gelu`` is the exact Gaussian-CDF form ``x * Phi(x)``.
"""

from __future__ import annotations

import math
import threading
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "zeros",
    "ones",
    "full",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "activation",
    "relu",
    "gelu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "sin",
    "square",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "concat",
    "broadcast_to",
    "take_rows",
    "clamp_min",
    "init_linear",
    "init_conv_kernel",
]

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes, axes or dtypes are incompatible."""


# --------------------------------------------------------------------------
# grad mode (thread-local, so threaded evaluation cannot race the flag)

_GRAD_STATE = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class no_grad:
    """Context manager disabling graph recording (evaluation fast path)."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_STATE.enabled = self._prev
        return False


# --------------------------------------------------------------------------
# tensor node


class Tensor:
    """A dense numeric array plus an optional spot on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return len(self.data)

    # -- gradient plumbing ---------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from this scalar through its recorded graph.

        The computation record is consumed: a second ``backward`` through the
        same graph raises. Leaf tensors (parameters) can seed a trivial
        single-node record, so ``backward`` on a bare parameter is legal.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward called on a tensor with no computation record")
        if self._consumed:
            raise RuntimeError("computation record already consumed by a previous backward")

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

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._parents = ()
                node._consumed = True
                node.grad = None  # intermediate grads are not retained
        self._consumed = True

    # -- operator sugar -------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class Parameter:
    """A named leaf tensor with ``requires_grad`` forced on.

    ``name`` is the checkpoint-manifest path of the parameter inside a model;
    names must be unique within one model. ``complex_pairs`` marks tensors
    whose trailing axis of extent 2 stores (re, im) halves of complex weights,
    which count as a single parameter each in model-size reports.
    """

    __slots__ = ("name", "value", "complex_pairs")

    def __init__(self, name: str, value, complex_pairs: bool = False):
        if isinstance(value, Tensor):
            value.requires_grad = True
            self.value = value
        else:
            self.value = Tensor(value, requires_grad=True)
        self.name = name
        self.complex_pairs = bool(complex_pairs)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr: np.ndarray):
        if arr.shape != self.value.data.shape:
            raise ShapeError(f"parameter {self.name}: shape {arr.shape} != {self.value.shape}")
        self.value.data = arr.astype(self.value.data.dtype, copy=False)

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.zero_grad()

    def numel(self) -> int:
        n = self.value.size
        return n // 2 if self.complex_pairs else n

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


# --------------------------------------------------------------------------
# node construction helpers


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def full(shape, value, dtype=np.float64) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote python scalars to the other operand's dtype; check dtypes."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return as_tensor(a), as_tensor(b)
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes in one operation: {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise binary ops


def _binary(a, b, fwd, grad_a, grad_b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad_a(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad_b(g, a.data, b.data), b.shape))

    return _node(data, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    # Division by zero yields inf/nan for the downstream finiteness check.
    with np.errstate(divide="ignore", invalid="ignore"):
        return _binary(
            a,
            b,
            np.divide,
            lambda g, x, y: g / y,
            lambda g, x, y: -g * x / (y * y),
        )


def elementwise_binary(a, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown binary kind {kind!r}")
    return ops[kind](a, b)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: a._accumulate(-g) if a.requires_grad else None)


# --------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(data, (a, b), backward)


# --------------------------------------------------------------------------
# elementwise activations


def _unary(a, fwd, grad) -> Tensor:
    a = as_tensor(a)
    data = fwd(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(grad(g, a.data, data))

    return _node(data, (a,), backward)


def relu(a) -> Tensor:
    # derivative at the kink (x == 0) is defined as 0
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0))


def _phi(x):
    return 0.5 * (1.0 + _erf(x * _SQRT1_2))


def gelu(a) -> Tensor:
    def grad(g, x, y):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return g * (_phi(x) + x * pdf)

    return _unary(a, lambda x: x * _phi(x), grad)


def _softplus_fwd(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    return _unary(a, _softplus_fwd, lambda g, x, y: g * _sigmoid_fwd(x))


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid_fwd, lambda g, x, y: g * y * (1.0 - y))


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a) -> Tensor:
    # log of nonpositive yields -inf/nan for the downstream finiteness check
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary(a, np.log, lambda g, x, y: g / x)


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda g, x, y: g * np.cos(x))


def square(a) -> Tensor:
    return _unary(a, np.square, lambda g, x, y: g * 2.0 * x)


_ACTIVATIONS = {
    "relu": relu,
    "gelu": gelu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sin": sin,
    "square": square,
}


def activation(a, kind: str) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    return _ACTIVATIONS[kind](a)


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(x, floor); subgradient 0 where the floor is active."""
    a = as_tensor(a)
    data = np.maximum(a.data, floor)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data >= floor))

    return _node(data, (a,), backward)


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for ndim {ndim}")
        axes.append(ax % ndim)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axis}")
    return tuple(sorted(axes))


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes if axes else None, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axes, keepdims))

    return _node(np.asarray(data), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes if axes else None, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axes, keepdims) / count)

    return _node(np.asarray(data), (a,), backward)


def reduce(a, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return reduce_sum(a, axis=axis, keepdims=keepdims)
    if kind == "mean":
        return reduce_mean(a, axis=axis, keepdims=keepdims)
    raise ValueError(f"unknown reduce kind {kind!r}")


# --------------------------------------------------------------------------
# data movement


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {a.ndim}")
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inverse))

    return _node(data, (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim:
            raise ShapeError("concat operands differ in rank")
        for d in range(ndim):
            if d != axis and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(
                    f"concat operands disagree on non-concatenated extent {d}: "
                    f"{t.shape} vs {ts[0].shape}"
                )
        if t.dtype != ts[0].dtype:
            raise ShapeError("concat operands must share a dtype")
    data = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(data, ts, backward)


def _check_slice(s: slice, extent: int) -> slice:
    step = 1 if s.step is None else s.step
    if step < 1:
        raise ShapeError("only positive slice steps are supported")
    start = 0 if s.start is None else s.start
    stop = extent if s.stop is None else s.stop
    if start < 0:
        start += extent
    if stop < 0:
        stop += extent
    if not (0 <= start <= extent and 0 <= stop <= extent):
        raise ShapeError(f"slice [{s.start}:{s.stop}] out of bounds for extent {extent}")
    return slice(start, stop, step)


def _getitem(a: Tensor, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > a.ndim:
        raise ShapeError(f"too many indices for shape {a.shape}")
    norm = []
    for k, extent in zip(key, a.shape):
        if isinstance(k, slice):
            norm.append(_check_slice(k, extent))
        elif isinstance(k, (int, np.integer)):
            k = int(k)
            if not -extent <= k < extent:
                raise ShapeError(f"index {k} out of bounds for extent {extent}")
            norm.append(k % extent)
        else:
            raise ShapeError("only int and slice indices are supported")
    norm = tuple(norm)
    data = a.data[norm]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[norm] = g
            a._accumulate(buf)

    return _node(data, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))

    return _node(np.ascontiguousarray(data), (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index array")
    if a.ndim < 1:
        raise ShapeError("take_rows needs at least one dimension")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index out of bounds for extent {a.shape[0]}")
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _node(data, (a,), backward)


# --------------------------------------------------------------------------
# parameter initialization


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64):
    """Dense-layer init: weights uniform in +-sqrt(1/fan_in), biases zero."""
    bound = math.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    b = np.zeros(fan_out, dtype=dtype)
    return w, b


def init_conv_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype=np.float64):
    """Conv kernel init with fan_in = c_in * k, biases zero."""
    bound = math.sqrt(1.0 / (c_in * k))
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return w, b
