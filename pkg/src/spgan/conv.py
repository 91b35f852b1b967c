"""2-D convolution, its adjoint, and the kernel-gradient product.

The three operations close under differentiation: each one's backward is
expressed with the other two, so second-order gradients through
convolutional critics come for free.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, GeometryError
from .tensor import Function, Tensor, as_tensor


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"extent {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    out = (n - 1) * stride - 2 * padding + k
    if out <= 0:
        raise GeometryError(f"transposed convolution of extent {n} collapses to {out}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Rows are output positions (n, i, j); columns are (u, v, c) kernel taps."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xt = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    xt[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for u in range(kh):
        for v in range(kw):
            cols[:, :, :, u, v, :] = xt[:, u : u + hs : stride, v : v + ws : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def _conv2d(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    f, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2))


def _conv2d_transpose(y, w, stride, padding):
    if y.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose expects 4-D input and kernel, got {y.shape} and {w.shape}"
        )
    if y.shape[1] != w.shape[0]:
        raise DimensionError(f"input channels {y.shape[1]} != kernel channels {w.shape[0]}")
    n, f, hy, wy = y.shape
    c, kh, kw = w.shape[1:]
    h = conv_transpose_output_size(hy, kh, stride, padding)
    wd = conv_transpose_output_size(wy, kw, stride, padding)
    cols = y.transpose(0, 2, 3, 1).reshape(n * hy * wy, f) @ w.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
    cols = cols.reshape(n, hy, wy, kh, kw, c)
    buf = np.zeros((n, h + 2 * padding, wd + 2 * padding, c))
    hs, ws = stride * (hy - 1) + 1, stride * (wy - 1) + 1
    for u in range(kh):
        for v in range(kw):
            buf[:, u : u + hs : stride, v : v + ws : stride, :] += cols[:, :, :, u, v, :]
    buf = buf[:, padding : padding + h, padding : padding + wd, :]
    return np.ascontiguousarray(buf.transpose(0, 3, 1, 2))


def _kernel_grad(x, gy, kh, kw, stride, padding):
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    if (ho, wo) != gy.shape[2:]:
        raise DimensionError(f"output-gradient extent {gy.shape[2:]} != {(ho, wo)}")
    f = gy.shape[1]
    dw = cols.T @ gy.transpose(0, 2, 3, 1).reshape(-1, f)
    return np.ascontiguousarray(dw.reshape(kh, kw, x.shape[1], f).transpose(3, 2, 0, 1))


class Conv2d(Function):
    __slots__ = ()

    def forward(self, x, w, stride=1, padding=0):
        self.saved = (stride, padding)
        return _conv2d(x, w, stride, padding)

    def backward(self, g):
        x, w = self.inputs
        s, p = self.saved
        gx = conv2d_transpose(g, w, s, p) if x.requires_grad else None
        gw = conv2d_kernel_grad(x, g, w.shape[2:], s, p) if w.requires_grad else None
        return gx, gw


class Conv2dTranspose(Function):
    __slots__ = ()

    def forward(self, y, w, stride=1, padding=0):
        self.saved = (stride, padding)
        return _conv2d_transpose(y, w, stride, padding)

    def backward(self, g):
        y, w = self.inputs
        s, p = self.saved
        gy = conv2d(g, w, s, p) if y.requires_grad else None
        gw = conv2d_kernel_grad(g, y, w.shape[2:], s, p) if w.requires_grad else None
        return gy, gw


class Conv2dKernelGrad(Function):
    """Bilinear map (x, gy) -> dW of ``conv2d(x, W)`` paired with ``gy``."""

    __slots__ = ()

    def forward(self, x, gy, ksize=(1, 1), stride=1, padding=0):
        self.saved = (stride, padding)
        return _kernel_grad(x, gy, ksize[0], ksize[1], stride, padding)

    def backward(self, g):
        x, gy = self.inputs
        s, p = self.saved
        gx = conv2d_transpose(gy, g, s, p) if x.requires_grad else None
        ggy = conv2d(x, g, s, p) if gy.requires_grad else None
        return gx, ggy


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [N,C,H,W] input with a [F,C,kh,kw] kernel."""
    return Conv2d.apply(as_tensor(x), as_tensor(kernel), stride=int(stride), padding=int(padding))


def conv2d_transpose(y, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` in its first argument.

    ``y`` is [N,F,H,W] and ``kernel`` is the same [F,C,kh,kw] array that the
    forward convolution would use; output is [N,C,(H-1)*stride-2*padding+kh, ...].
    """
    return Conv2dTranspose.apply(
        as_tensor(y), as_tensor(kernel), stride=int(stride), padding=int(padding)
    )


def conv2d_kernel_grad(x, gy, ksize, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2dKernelGrad.apply(
        as_tensor(x), as_tensor(gy), ksize=tuple(ksize), stride=int(stride), padding=int(padding)
    )
