"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass whose
``backward`` is itself written in terms of tensor operations. Running
:func:`backward` with ``create_graph=True`` therefore records the gradient
computation on the graph, and the returned gradients can be differentiated
again (double backprop). This is what the gradient penalty needs.

Graph nodes carry a monotonically increasing sequence number assigned at
creation, so inputs always precede outputs and sorting by sequence number is
a valid topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_GRAD_ENABLED = True
_SEQ = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = bool(flag)
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float64 array that may participate in a graph.

    ``requires_grad`` marks tensors whose gradients are wanted; tensors that
    result from an operation on such inputs carry a reference to the
    producing :class:`Function` in ``fn``.
    """

    __slots__ = ("data", "requires_grad", "fn", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.fn: Function | None = None
        self.name = name

    # -- basic introspection ---------------------------------------------
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
    def is_leaf(self) -> bool:
        return self.fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other):
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other):
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other):
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other):
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other):
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other):
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other):
        return Div.apply(as_tensor(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    # -- methods mirroring the free functions ------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
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
        return transpose(self, None)

    def relu(self):
        return Relu.apply(self)

    def square(self):
        return Square.apply(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible") from None


class Function:
    """A recorded operation. Subclasses implement ``forward`` on arrays and
    ``backward`` on tensors, returning one gradient (or None) per input."""

    __slots__ = ("inputs", "seq", "saved")

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.seq = -1
        self.saved = None

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, g: Tensor) -> tuple:  # pragma: no cover - abstract
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            fn.seq = next(_SEQ)
            out.requires_grad = True
            out.fn = fn
        return out


def sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    out = tsum(g, axes, keepdims=True)
    return reshape(out, shape)


class _Binary(Function):
    __slots__ = ()

    def _check(self, a, b):
        _broadcast_shape(a.shape, b.shape)


class Add(_Binary):
    __slots__ = ()

    def forward(self, a, b):
        self._check(a, b)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g, a.shape) if a.requires_grad else None
        gb = sum_to(g, b.shape) if b.requires_grad else None
        return ga, gb


class Sub(_Binary):
    __slots__ = ()

    def forward(self, a, b):
        self._check(a, b)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g, a.shape) if a.requires_grad else None
        gb = sum_to(-g, b.shape) if b.requires_grad else None
        return ga, gb


class Mul(_Binary):
    __slots__ = ()

    def forward(self, a, b):
        self._check(a, b)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb


class Div(_Binary):
    __slots__ = ()

    def forward(self, a, b):
        self._check(a, b)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(-g * a / (b * b), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    __slots__ = ()

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


def _mask(cond: np.ndarray) -> Tensor:
    return Tensor(cond.astype(np.float64))


class Relu(Function):
    __slots__ = ()

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g):
        return (g * _mask(self.inputs[0].data > 0),)


class LeakyRelu(Function):
    __slots__ = ()

    def forward(self, a, slope=0.2):
        self.saved = slope
        return np.where(a > 0, a, slope * a)

    def backward(self, g):
        return (g * Tensor(np.where(self.inputs[0].data > 0, 1.0, self.saved)),)


class Square(Function):
    __slots__ = ()

    def forward(self, a):
        return a * a

    def backward(self, g):
        return (g * self.inputs[0] * 2.0,)


class Abs(Function):
    __slots__ = ()

    def forward(self, a):
        return np.abs(a)

    def backward(self, g):
        return (g * Tensor(np.sign(self.inputs[0].data)),)


class Sign(Function):
    __slots__ = ()

    def forward(self, a):
        return np.sign(a)

    def backward(self, g):
        return (None,)


class Sqrt(Function):
    __slots__ = ()

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g):
        return (g * 0.5 / Sqrt.apply(self.inputs[0]),)


class Exp(Function):
    __slots__ = ()

    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * Exp.apply(self.inputs[0]),)


class Log(Function):
    __slots__ = ()

    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Sigmoid(Function):
    __slots__ = ()

    def forward(self, a):
        return 0.5 * (1.0 + np.tanh(0.5 * a))

    def backward(self, g):
        s = Sigmoid.apply(self.inputs[0])
        return (g * s * (1.0 - s),)


class Softplus(Function):
    """log(1 + exp(a)), evaluated without overflow."""

    __slots__ = ()

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, g):
        return (g * Sigmoid.apply(self.inputs[0]),)


class SoftThreshold(Function):
    __slots__ = ()

    def forward(self, a, lam=0.0):
        self.saved = lam
        return np.sign(a) * np.maximum(np.abs(a) - lam, 0.0)

    def backward(self, g):
        # closed dead zone: derivative 0 at |a| == lam
        return (g * _mask(np.abs(self.inputs[0].data) > self.saved),)


class Sum(Function):
    __slots__ = ()

    def forward(self, a, axis=None, keepdims=False):
        self.saved = (axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        x = self.inputs[0]
        axis, keepdims = self.saved
        if not keepdims:
            if axis is None:
                kept = (1,) * x.ndim
            else:
                axes = {ax % x.ndim for ax in np.atleast_1d(axis)}
                kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
            g = reshape(g, kept)
        return (broadcast_to(g, x.shape),)


class Reshape(Function):
    __slots__ = ()

    def forward(self, a, shape=()):
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(self, g):
        return (reshape(g, self.inputs[0].shape),)


class Transpose(Function):
    __slots__ = ()

    def forward(self, a, axes=None):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        self.saved = tuple(axes)
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, g):
        return (transpose(g, tuple(np.argsort(self.saved))),)


class BroadcastTo(Function):
    __slots__ = ()

    def forward(self, a, shape=()):
        _broadcast_shape(a.shape, shape)
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    def backward(self, g):
        return (sum_to(g, self.inputs[0].shape),)


class MatMul(Function):
    __slots__ = ()

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, transpose(b, None)) if a.requires_grad else None
        gb = matmul(transpose(a, None), g) if b.requires_grad else None
        return ga, gb


class Concat(Function):
    __slots__ = ()

    def forward(self, *arrays, axis=0):
        self.saved = (axis, [a.shape[axis] for a in arrays])
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None

    def backward(self, g):
        axis, sizes = self.saved
        out, start = [], 0
        for t, n in zip(self.inputs, sizes):
            out.append(take_slice(g, axis, start, start + n) if t.requires_grad else None)
            start += n
        return tuple(out)


class Slice(Function):
    __slots__ = ()

    def forward(self, a, axis=0, start=0, stop=0):
        self.saved = (axis, start, stop)
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop)
        return np.ascontiguousarray(a[tuple(idx)])

    def backward(self, g):
        axis, start, stop = self.saved
        shape = self.inputs[0].shape
        before = list(shape)
        before[axis] = start
        after = list(shape)
        after[axis] = shape[axis] - stop
        parts = []
        if start > 0:
            parts.append(Tensor(np.zeros(before)))
        parts.append(g)
        if stop < shape[axis]:
            parts.append(Tensor(np.zeros(after)))
        return (concat(parts, axis) if len(parts) > 1 else g,)


# -- free functions ------------------------------------------------------

ELEMENTWISE = {
    "add": Add,
    "sub": Sub,
    "mul": Mul,
    "relu": Relu,
    "square": Square,
    "abs": Abs,
    "sign": Sign,
}


def elementwise(op_tag: str, a, b=None) -> Tensor:
    """Apply a named elementwise operation (binary ops broadcast)."""
    try:
        cls = ELEMENTWISE[op_tag]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op_tag!r}") from None
    if issubclass(cls, _Binary):
        if b is None:
            raise ContractError(f"{op_tag} needs two operands")
        return cls.apply(as_tensor(a), as_tensor(b))
    return cls.apply(as_tensor(a))


def relu(a):
    return Relu.apply(as_tensor(a))


def leaky_relu(a, slope=0.2):
    return LeakyRelu.apply(as_tensor(a), slope=slope)


def square(a):
    return Square.apply(as_tensor(a))


def tabs(a):
    return Abs.apply(as_tensor(a))


def sign(a):
    return Sign.apply(as_tensor(a))


def sqrt(a):
    return Sqrt.apply(as_tensor(a))


def exp(a):
    return Exp.apply(as_tensor(a))


def log(a):
    return Log.apply(as_tensor(a))


def sigmoid(a):
    return Sigmoid.apply(as_tensor(a))


def softplus(a):
    return Softplus.apply(as_tensor(a))


def soft_threshold(a, lam: float) -> Tensor:
    """Shrink toward zero: sign(a) * max(|a| - lam, 0)."""
    lam = float(lam)
    if not lam >= 0:
        raise ParameterError(f"soft-threshold level must be nonnegative, got {lam}")
    return SoftThreshold.apply(as_tensor(a), lam=lam)


def tsum(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    return Reshape.apply(as_tensor(a), shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(as_tensor(a), axes=axes)


def broadcast_to(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return BroadcastTo.apply(a, shape=tuple(shape))


def matmul(a, b):
    return MatMul.apply(as_tensor(a), as_tensor(b))


def concat(tensors: Sequence, axis=0):
    return Concat.apply(*(as_tensor(t) for t in tensors), axis=axis)


def take_slice(a, axis, start, stop):
    return Slice.apply(as_tensor(a), axis=axis, start=start, stop=stop)


def log_softmax(logits: Tensor, axis=-1) -> Tensor:
    shift = Tensor(np.max(logits.data, axis=axis, keepdims=True))
    z = logits - shift
    return z - log(tsum(exp(z), axis, keepdims=True))


# -- reverse pass --------------------------------------------------------


class GradResult(dict):
    """Mapping from tensor to its gradient. Keys are compared by identity."""

    def __missing__(self, key):
        raise KeyError(f"no gradient recorded for {key!r}")


def _collect(root: Tensor) -> list[Function]:
    seen: set[int] = set()
    nodes: list[Function] = []
    stack = [root.fn]
    while stack:
        fn = stack.pop()
        if fn is None or id(fn) in seen:
            continue
        seen.add(id(fn))
        nodes.append(fn)
        stack.extend(t.fn for t in fn.inputs if t.fn is not None)
    nodes.sort(key=lambda f: f.seq, reverse=True)
    return nodes


def _key(t: Tensor):
    # non-leaf tensors are identified by their producing node
    return ("f", id(t.fn)) if t.fn is not None else ("l", id(t))


def backward(
    output: Tensor,
    wrt: Iterable[Tensor] | None = None,
    create_graph: bool = False,
) -> GradResult:
    """Gradients of a single-element tensor.

    Returns gradients for every tensor in ``wrt`` (zeros if unreachable; each
    must have ``requires_grad``), or,
    when ``wrt`` is None, for every reachable leaf with ``requires_grad``.
    With ``create_graph=True`` the gradient computation is recorded so that
    the returned gradients are themselves differentiable.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    wanted = list(wrt) if wrt is not None else None
    if wanted is not None:
        for t in wanted:
            if not t.requires_grad:
                raise ContractError(f"{t!r} does not track gradients and cannot be a differentiation target")
    seed = Tensor(np.ones(output.shape))
    grads = {_key(output): seed}
    leaves: dict = {}
    if output.fn is None and output.requires_grad:
        leaves[_key(output)] = output

    if output.fn is not None:
        with set_grad_enabled(create_graph):
            for fn in _collect(output):
                g = grads.get(("f", id(fn)))
                if g is None:
                    continue
                for t, gi in zip(fn.inputs, fn.backward(g)):
                    if gi is None or not t.requires_grad:
                        continue
                    k = _key(t)
                    grads[k] = gi if k not in grads else grads[k] + gi
                    if t.fn is None:
                        leaves[k] = t

    result = GradResult()
    if wanted is None:
        for k, t in leaves.items():
            result[t] = grads[k]
    else:
        for t in wanted:
            g = grads.get(_key(t))
            result[t] = g if g is not None else Tensor(np.zeros(t.shape))
    return result
