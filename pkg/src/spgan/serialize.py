"""Binary tensor blocks and the file containers built from them.

A tensor block is ``rank`` (u32) followed by ``rank`` extents (u32 each),
all little-endian, then the row-major float64 payload (little-endian).

Containers prefix blocks with an 8-byte magic:

* ``SPGDICT1``: one block, the m x k dictionary.
* ``SPGDATA1``: one block, an [N, C, H, W] image stack; an optional second
  block holds labels as float64.
* ``SPGCKPT1``: ``u32`` section count, then per section ``u32`` name length,
  UTF-8 name, ``u32`` block count and that many labelled blocks (``u32``
  label length, UTF-8 label, tensor block).
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

DICT_MAGIC = b"SPGDICT1"
DATA_MAGIC = b"SPGDATA1"
CKPT_MAGIC = b"SPGCKPT1"


def write_tensor(f: BinaryIO, arr) -> None:
    arr = np.array(arr, dtype="<f8", order="C")
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes(order="C"))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    pos = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", pos)
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "tensor rank"))
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank}", f.tell() - 4)
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "tensor extents")) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(f, 8 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def _check_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(8)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)


def save_dictionary(path, atoms: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(DICT_MAGIC)
        write_tensor(f, atoms)


def load_dictionary(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_magic(f, DICT_MAGIC)
        atoms = read_tensor(f)
    if atoms.ndim != 2:
        raise FormatError(f"dictionary block must be 2-D, got shape {atoms.shape}", 8)
    return atoms


def save_dataset(path, images: np.ndarray, labels: np.ndarray | None = None) -> None:
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        write_tensor(f, images)
        if labels is not None:
            write_tensor(f, np.asarray(labels, dtype=np.float64))


def load_dataset_blocks(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as f:
        _check_magic(f, DATA_MAGIC)
        images = read_tensor(f)
        labels = None
        pos = f.tell()
        if f.read(1):
            f.seek(pos)
            labels = read_tensor(f)
            if labels.shape != images.shape[:1]:
                raise FormatError(f"label block shape {labels.shape} does not match {images.shape[0]} images", pos)
            if f.read(1):
                raise FormatError("trailing bytes after label block", f.tell() - 1)
    if images.ndim != 4:
        raise FormatError(f"image block must be [N, C, H, W], got shape {images.shape}", 8)
    return images, labels


def _write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4, "string length"))
    pos = f.tell()
    raw = _read_exact(f, n, "string")
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("string is not valid UTF-8", pos) from None


def save_sections(path, sections: Mapping[str, Mapping[str, np.ndarray]]) -> None:
    """Write an ``SPGCKPT1`` file; dict order is preserved on disk."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(sections)))
        for name, blocks in sections.items():
            _write_str(f, name)
            f.write(struct.pack("<I", len(blocks)))
            for label, arr in blocks.items():
                _write_str(f, label)
                write_tensor(f, arr)
    tmp.replace(path)


def load_sections(path) -> dict[str, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        _check_magic(f, CKPT_MAGIC)
        (n_sections,) = struct.unpack("<I", _read_exact(f, 4, "section count"))
        out: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(n_sections):
            name = _read_str(f)
            (n_blocks,) = struct.unpack("<I", _read_exact(f, 4, "block count"))
            blocks = {}
            for _ in range(n_blocks):
                label = _read_str(f)
                blocks[label] = read_tensor(f)
            out[name] = blocks
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after last section", f.tell() - 1)
    return out
