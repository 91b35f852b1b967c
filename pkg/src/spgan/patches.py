"""Patch extraction and overlap-averaged reassembly.

Layout conventions (fixed so dictionaries and generators interoperate):

* an image is ``[C, H, W]``; a batch is ``[N, C, H, W]``
* a patch vector has length ``m = p * p * C`` (``p * patch_w * C`` for
  rectangular patches), ordered row-major over the patch with the channel
  index fastest: element ``(u * patch_w + v) * C + c``
* patches are columns of an ``[m, s]`` matrix (``[N, m, s]`` for batches),
  with the patch grid enumerated column-major: column ``j * grid_h + i``
  holds the patch whose top-left pixel is ``(i * stride, j * stride)``
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GeometryError
from .tensor import Function, Tensor


@dataclass(frozen=True)
class PatchGeometry:
    image_h: int
    image_w: int
    channels: int
    patch: int
    stride: int
    patch_w: int | None = None  # None means square patches

    def __post_init__(self):
        if self.patch_w is None:
            object.__setattr__(self, "patch_w", self.patch)
        for name in ("image_h", "image_w", "channels", "patch", "patch_w", "stride"):
            if int(getattr(self, name)) < 1:
                raise GeometryError(f"{name} must be positive, got {getattr(self, name)}")
        ph, pw, t = self.patch, self.patch_w, self.stride
        if ph > self.image_h or pw > self.image_w:
            raise GeometryError(f"patch {ph}x{pw} larger than image {self.image_h}x{self.image_w}")
        if (self.image_h - ph) % t or (self.image_w - pw) % t:
            raise GeometryError(
                f"patch {ph}x{pw} with stride {t} does not tile a {self.image_h}x{self.image_w} image"
            )
        if (t > ph and self.image_h > ph) or (t > pw and self.image_w > pw):
            raise GeometryError(f"stride {t} skips pixels between {ph}x{pw} patches")

    @property
    def grid_h(self) -> int:
        return (self.image_h - self.patch) // self.stride + 1

    @property
    def grid_w(self) -> int:
        return (self.image_w - self.patch_w) // self.stride + 1

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch_w * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_h, self.image_w)

    @cached_property
    def coverage(self) -> np.ndarray:
        """Number of patches covering each pixel, shape [H, W]."""
        ones = np.ones((1, self.patch_dim, self.n_patches))
        return _fold(ones, self)[0, 0]


def _check_image(x: np.ndarray, geom: PatchGeometry) -> None:
    if x.ndim != 4 or x.shape[1:] != geom.image_shape:
        raise DimensionError(f"image batch shape {x.shape} does not match geometry {geom.image_shape}")


def _check_patches(P: np.ndarray, geom: PatchGeometry) -> None:
    want = (geom.patch_dim, geom.n_patches)
    if P.ndim != 3 or P.shape[1:] != want:
        raise DimensionError(f"patch batch shape {P.shape} does not match geometry (N, {want[0]}, {want[1]})")


def _unfold(x: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    t = geom.stride
    win = sliding_window_view(x, (geom.patch, geom.patch_w), axis=(2, 3))[:, :, ::t, ::t]  # N C i j u v
    cols = win.transpose(0, 4, 5, 1, 3, 2)  # N u v c j i
    return np.ascontiguousarray(cols).reshape(x.shape[0], geom.patch_dim, geom.n_patches)


def _fold(P: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    ph, pw, t, c = geom.patch, geom.patch_w, geom.stride, geom.channels
    gh, gw = geom.grid_h, geom.grid_w
    n = P.shape[0]
    arr = P.reshape(n, ph, pw, c, gw, gh).transpose(0, 3, 5, 4, 1, 2)  # N c i j u v
    out = np.zeros((n, c, geom.image_h, geom.image_w))
    hs, ws = t * (gh - 1) + 1, t * (gw - 1) + 1
    for u in range(ph):
        for v in range(pw):
            out[:, :, u : u + hs : t, v : v + ws : t] += arr[:, :, :, :, u, v]
    return out


class Unfold(Function):
    __slots__ = ()

    def forward(self, x, geom=None):
        _check_image(x, geom)
        self.saved = geom
        return _unfold(x, geom)

    def backward(self, g):
        return (Fold.apply(g, geom=self.saved, average=False),)


class Fold(Function):
    """Scatter patches back onto the pixel grid, summing or averaging overlaps."""

    __slots__ = ()

    def forward(self, P, geom=None, average=True):
        _check_patches(P, geom)
        self.saved = (geom, average)
        out = _fold(P, geom)
        if average:
            out /= geom.coverage
        return out

    def backward(self, g):
        geom, average = self.saved
        if average:
            g = g * Tensor(1.0 / geom.coverage)
        return (Unfold.apply(g, geom=geom),)


def _apply(fn, x, geom, batch_ndim, **kw):
    is_tensor = isinstance(x, Tensor)
    t = x if is_tensor else Tensor(np.asarray(x, dtype=np.float64))
    single = t.ndim == batch_ndim - 1
    if single:
        t = t.reshape((1,) + t.shape)
    out = fn.apply(t, geom=geom, **kw)
    if single:
        out = out.reshape(out.shape[1:])
    return out if is_tensor else out.data


def extract_patches(img, geom: PatchGeometry):
    """Vectorized patches of an image ``[C,H,W]`` -> ``[m,s]`` (or batch ``[N,C,H,W]`` -> ``[N,m,s]``).

    Accepts arrays or tensors and returns the same kind; tensor inputs stay on
    the graph.
    """
    return _apply(Unfold, img, geom, 4)


def assemble_image(patches, geom: PatchGeometry):
    """Inverse of :func:`extract_patches`: each pixel is the mean of the patch
    values covering it."""
    return _apply(Fold, patches, geom, 3, average=True)
