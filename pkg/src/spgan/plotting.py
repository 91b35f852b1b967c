"""Image files and report figures.

PGM/PPM writers are dependency-free and byte-exact; the matplotlib figures
are for humans reading a run directory.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] intensities to uint8 with round-half-up."""
    x = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.floor((x + 1.0) * 127.5 + 0.5).astype(np.uint8)


def write_pnm(path, img) -> None:
    """Write a ``[C, H, W]`` image as binary PGM (C=1) or PPM (C=3)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DimensionError(f"PNM images must be [1|3, H, W], got {img.shape}")
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    body = to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body)


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`write_pnm` back to uint8 ``[C, H, W]``."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file", 0)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", 0)
    c = 1 if parts[0] == b"P5" else 3
    body = parts[4]
    if len(body) != w * h * c:
        raise FormatError(f"pixel payload is {len(body)} bytes, expected {w * h * c}", len(raw) - len(body))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)


def image_grid(images, cols: int | None = None, pad: int = 1, fill: float = -1.0) -> np.ndarray:
    """Tile ``[N, C, H, W]`` images into one ``[C, H', W']`` image."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for i in range(n):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        out[:, y : y + h, x : x + w] = images[i]
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(rows: list[dict], path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    it = [r["iter"] for r in rows]
    for ax, key in zip(axes.ravel(), ("L_D", "L_G", "L_R", "gp_term")):
        ax.plot(it, [r[key] for r in rows], lw=0.8)
        ax.set_title(key)
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_samples(images, path, cols: int | None = None) -> None:
    plt = _pyplot()
    grid = image_grid(images, cols)
    fig, ax = plt.subplots(figsize=(6, 6))
    if grid.shape[0] == 1:
        ax.imshow(grid[0], cmap="gray", vmin=-1, vmax=1)
    else:
        ax.imshow((np.clip(grid, -1, 1).transpose(1, 2, 0) + 1) / 2)
    ax.axis("off")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def plot_mode_histogram(counts, within, path) -> None:
    plt = _pyplot()
    idx = np.arange(len(counts))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(idx, counts, color="0.75", label="nearest")
    ax.bar(idx, within, color="C0", label="within tau")
    ax.set_xlabel("mode")
    ax.set_ylabel("samples")
    ax.set_xticks(idx)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_dictionary_objective(objectives, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(objectives, lw=0.8)
    ax.set_xlabel("batch")
    ax.set_ylabel("coding objective")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
