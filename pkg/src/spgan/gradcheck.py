"""Finite-difference, adjoint and second-order checks for the autodiff ops.

Each op case draws random inputs, forms the scalar ``sum(op(inputs) * r)``
for a random weight tensor ``r``, and compares the reverse-mode gradient
with central differences. Inputs for ops with kinks are drawn away from the
kink so the difference quotient is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .conv import conv2d, conv2d_transpose, conv2d_kernel_grad
from .dataio import make_rng
from .patches import PatchGeometry, assemble_image, extract_patches
from .tensor import Tensor, backward, no_grad

FD_STEP = 1e-5
FD_TOL = 1e-4
ADJOINT_TOL = 1e-10
SECOND_ORDER_TOL = 1e-3


@dataclass
class CheckRow:
    suite: str
    op: str
    instances: int
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_err <= self.tol)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.suite}\t{self.op}\t{self.instances}\t{self.max_err:.3e}\t{self.tol:.0e}\t{verdict}"


TABLE_HEADER = "suite\top\tinstances\tmax_err\ttol\tresult"


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10))


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * step)
    return g


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng, step: float = FD_STEP) -> float:
    """Worst relative error over all inputs between reverse-mode and central-difference gradients."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    grads = backward(T.tsum(out * weights), tensors)

    def value():
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    worst = 0.0
    for a, t in zip(arrays, tensors):
        # share storage so numeric_grad's in-place pokes reach value()
        num = numeric_grad(value, a, step)
        worst = max(worst, rel_err(grads[t].data, num))
    return worst


# -- op cases --------------------------------------------------------------


def _away(rng, shape, kinks=(0.0,), margin=0.05, scale=1.0):
    """Normal samples nudged so none lies within ``margin`` of a kink."""
    x = rng.normal(scale=scale, size=shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, margin, -margin) * 2
    return x


def _pos(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _shape(rng, max_ndim=3, max_ext=4):
    return tuple(int(v) for v in rng.integers(1, max_ext + 1, size=int(rng.integers(1, max_ndim + 1))))


def _conv_geom(rng):
    s = int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    p = int(rng.integers(0, k))
    ho = int(rng.integers(1, 4))
    h = (ho - 1) * s + k - 2 * p
    if h < 1:
        h += s * ((1 - h) // s + 1)
        ho = (h + 2 * p - k) // s + 1
    return s, k, p, h, ho


def _case_conv(rng):
    s, k, p, h, _ = _conv_geom(rng)
    n, c, f = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    return (lambda x, w: conv2d(x, w, s, p)), [rng.normal(size=(n, c, h, h)), rng.normal(size=(f, c, k, k))]


def _case_convt(rng):
    s, k, p, h, ho = _conv_geom(rng)
    n, c, f = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    return (lambda y, w: conv2d_transpose(y, w, s, p)), [rng.normal(size=(n, f, ho, ho)), rng.normal(size=(f, c, k, k))]


def _case_kgrad(rng):
    s, k, p, h, ho = _conv_geom(rng)
    n, c, f = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    return (lambda x, gy: conv2d_kernel_grad(x, gy, (k, k), s, p)), [rng.normal(size=(n, c, h, h)), rng.normal(size=(n, f, ho, ho))]


def _patch_geom(rng):
    p = int(rng.integers(1, 4))
    t = int(rng.integers(1, p + 1))
    gh, gw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    c = int(rng.integers(1, 3))
    return PatchGeometry((gh - 1) * t + p, (gw - 1) * t + p, c, p, t)


def _case_unfold(rng):
    g = _patch_geom(rng)
    return (lambda x: extract_patches(x, g)), [rng.normal(size=(2,) + g.image_shape)]


def _case_fold(rng):
    g = _patch_geom(rng)
    return (lambda P: assemble_image(P, g)), [rng.normal(size=(2, g.patch_dim, g.n_patches))]


def _binary(op):
    def case(rng):
        a_shape = _shape(rng)
        # trailing-aligned broadcast: b takes a suffix of a's shape, maybe with ones
        b_shape = tuple(1 if rng.random() < 0.3 else e for e in a_shape[int(rng.integers(0, len(a_shape))):])
        a, b = rng.normal(size=a_shape), rng.normal(size=b_shape)
        if op == "div":
            b = np.where(rng.random(b_shape) < 0.5, -1, 1) * _pos(rng, b_shape)
            return (lambda x, y: x / y), [a, b]
        return (lambda x, y: T.elementwise(op, x, y)), [a, b]

    return case


def _unary(fn, sampler=None):
    def case(rng):
        shape = _shape(rng)
        x = sampler(rng, shape) if sampler else rng.normal(size=shape)
        return fn, [x]

    return case


def _case_soft_threshold(rng):
    lam = float(rng.uniform(0.0, 1.0))
    shape = _shape(rng)
    x = _away(rng, shape, kinks=(-lam, lam))
    return (lambda a: T.soft_threshold(a, lam)), [x]


def _case_sum(rng):
    shape = _shape(rng)
    axis = int(rng.integers(0, len(shape))) if rng.random() < 0.7 else None
    keep = bool(rng.random() < 0.5)
    return (lambda a: T.tsum(a, axis, keepdims=keep)), [rng.normal(size=shape)]


def _case_mean(rng):
    shape = _shape(rng)
    axis = int(rng.integers(0, len(shape))) if rng.random() < 0.7 else None
    return (lambda a: T.mean(a, axis)), [rng.normal(size=shape)]


def _case_reshape(rng):
    shape = _shape(rng)
    return (lambda a: T.reshape(a, (-1,))), [rng.normal(size=shape)]


def _case_transpose(rng):
    shape = _shape(rng)
    axes = tuple(int(v) for v in rng.permutation(len(shape)))
    return (lambda a: T.transpose(a, axes)), [rng.normal(size=shape)]


def _case_broadcast(rng):
    shape = _shape(rng, 2)
    lead = int(rng.integers(1, 4))
    return (lambda a: T.broadcast_to(a, (lead,) + shape)), [rng.normal(size=shape)]


def _case_matmul(rng):
    m, n, p = (int(v) for v in rng.integers(1, 5, size=3))
    return T.matmul, [rng.normal(size=(m, n)), rng.normal(size=(n, p))]


def _case_concat(rng):
    shape = _shape(rng)
    axis = int(rng.integers(0, len(shape)))
    other = list(shape)
    other[axis] = int(rng.integers(1, 4))
    return (lambda a, b: T.concat([a, b], axis)), [rng.normal(size=shape), rng.normal(size=other)]


def _case_slice(rng):
    shape = _shape(rng)
    axis = int(rng.integers(0, len(shape)))
    start = int(rng.integers(0, shape[axis]))
    stop = int(rng.integers(start + 1, shape[axis] + 1))
    return (lambda a: T.take_slice(a, axis, start, stop)), [rng.normal(size=shape)]


def _case_log_softmax(rng):
    shape = _shape(rng)
    return (lambda a: T.log_softmax(a, -1)), [rng.normal(size=shape)]


OP_CASES: dict[str, Callable] = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div"),
    "neg": _unary(lambda a: -a),
    "relu": _unary(T.relu, lambda r, s: _away(r, s)),
    "leaky_relu": _unary(lambda a: T.leaky_relu(a, 0.2), lambda r, s: _away(r, s)),
    "square": _unary(T.square),
    "abs": _unary(T.tabs, lambda r, s: _away(r, s)),
    "sign": _unary(T.sign, lambda r, s: _away(r, s)),
    "sqrt": _unary(T.sqrt, _pos),
    "exp": _unary(T.exp),
    "log": _unary(T.log, _pos),
    "sigmoid": _unary(T.sigmoid),
    "softplus": _unary(T.softplus),
    "soft_threshold": _case_soft_threshold,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "broadcast_to": _case_broadcast,
    "matmul": _case_matmul,
    "concat": _case_concat,
    "slice": _case_slice,
    "log_softmax": _case_log_softmax,
    "conv2d": _case_conv,
    "conv2d_transpose": _case_convt,
    "conv2d_kernel_grad": _case_kgrad,
    "extract_patches": _case_unfold,
    "assemble_image": _case_fold,
}


def run_fd_suite(ops: Iterable[str] | None = None, instances: int = 20, seed: int = 0) -> list[CheckRow]:
    rows = []
    for name in OP_CASES if ops is None else ops:
        rng = make_rng(seed)
        worst = 0.0
        for _ in range(instances):
            fn, inputs = OP_CASES[name](rng)
            worst = max(worst, check_function(fn, inputs, rng))
        rows.append(CheckRow("fd", name, instances, worst, FD_TOL))
    return rows


# -- adjoint identities -----------------------------------------------------


def _adjoint_conv(rng) -> float:
    s, k, p, h, ho = _conv_geom(rng)
    n, c, f = (int(v) for v in rng.integers(1, 4, size=3))
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(f, c, k, k))
    y = rng.normal(size=(n, f, ho, ho))
    lhs = float(np.vdot(conv2d(x, w, s, p).data, y))
    rhs = float(np.vdot(x, conv2d_transpose(y, w, s, p).data))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-10)


def _adjoint_patches(rng) -> float:
    g = _patch_geom(rng)
    x = rng.normal(size=g.image_shape)
    P = rng.normal(size=(g.patch_dim, g.n_patches))
    lhs = float(np.vdot(extract_patches(x, g), P))
    # adjoint of extraction is the summing fold: averaging fold times coverage
    rhs = float(np.vdot(x, assemble_image(P, g) * g.coverage))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-10)


ADJOINT_CASES = {"conv2d/conv2d_transpose": _adjoint_conv, "extract_patches/fold": _adjoint_patches}


def run_adjoint_suite(ops: Iterable[str] | None = None, instances: int = 20, seed: int = 0) -> list[CheckRow]:
    rows = []
    for name in ADJOINT_CASES if ops is None else ops:
        rng = make_rng(seed)
        worst = max(ADJOINT_CASES[name](rng) for _ in range(instances))
        rows.append(CheckRow("adjoint", name, instances, worst, ADJOINT_TOL))
    return rows


# -- second order -----------------------------------------------------------


def penalty_param_check(rng, image: int = 5, channels: int = 2, batch: int = 3) -> float:
    """Double-backprop gradient of the mean gradient penalty of a tiny critic
    against central differences of the (first-order) penalty."""
    from .networks import Critic
    from .trainer import gradient_penalty, penalty_grad_fd

    critic = Critic((1, image, image), channels, 1, rng=rng)
    x_hat = rng.normal(size=(batch, 1, image, image))
    pen = gradient_penalty(critic, x_hat).mean()
    params = critic.parameters()
    auto = backward(pen, params)
    fd = penalty_grad_fd(critic, x_hat, FD_STEP)
    a = np.concatenate([auto[p].data.ravel() for p in params])
    n = np.concatenate([fd[p].data.ravel() for p in params])
    return rel_err(a, n)


SECOND_ORDER_CASES = {"gradient_penalty": penalty_param_check}


def run_second_order_suite(ops: Iterable[str] | None = None, instances: int = 5, seed: int = 0) -> list[CheckRow]:
    rows = []
    for name in SECOND_ORDER_CASES if ops is None else ops:
        rng = make_rng(seed)
        worst = max(SECOND_ORDER_CASES[name](rng) for _ in range(instances))
        rows.append(CheckRow("second_order", name, instances, worst, SECOND_ORDER_TOL))
    return rows


SUITES = {
    "fd": (run_fd_suite, OP_CASES),
    "adjoint": (run_adjoint_suite, ADJOINT_CASES),
    "second_order": (run_second_order_suite, SECOND_ORDER_CASES),
}


def run_gradcheck(selection: Iterable[str] | None = None, seed: int = 0, instances: int | None = None) -> list[CheckRow]:
    """Run the named checks.

    ``selection`` items are suite names (``fd``, ``adjoint``,
    ``second_order``) or individual op names; ``None`` runs everything and
    an empty selection runs nothing.
    """
    if selection is None:
        selection = list(SUITES)
    rows = []
    for item in selection:
        if item in SUITES:
            runner, _ = SUITES[item]
            kw = {} if instances is None else {"instances": instances}
            rows.extend(runner(None, seed=seed, **kw))
            continue
        for suite, (runner, cases) in SUITES.items():
            if item in cases:
                kw = {} if instances is None else {"instances": instances}
                rows.extend(runner([item], seed=seed, **kw))
                break
        else:
            raise KeyError(f"unknown gradcheck item {item!r}")
    return rows


def format_table(rows: Sequence[CheckRow]) -> str:
    return "".join(line + "\n" for line in [TABLE_HEADER] + [r.line() for r in rows])
