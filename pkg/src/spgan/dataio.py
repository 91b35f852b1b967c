"""Dataset ingestion and seeded synthetic multi-modal data.

All randomness in the package flows through :func:`make_rng`, which wraps
NumPy's Philox-4x64 counter-based bit generator keyed by an integer seed.
Philox output is fully specified by its key and counter, so seeded results
do not depend on platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .errors import ConfigError, ContractError, DimensionError, FormatError, ParameterError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class DatasetHandle:
    """Immutable image stack ``[N, C, H, W]`` with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        if images.ndim != 4:
            raise DimensionError(f"dataset images must be [N, C, H, W], got {images.shape}")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise DimensionError(f"{labels.shape[0]} labels for {images.shape[0]} images")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


# -- IDX ------------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Raw uint8 array from an IDX file (images or labels)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated IDX header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) < header_end + count:
        raise FormatError(
            f"truncated IDX payload: header promises {count} bytes, found {len(raw) - header_end}",
            len(raw),
        )
    if len(raw) > header_end + count:
        raise FormatError("trailing bytes after IDX payload", header_end + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(path, labels_path=None) -> DatasetHandle:
    """Load an IDX image file, rescaling [0, 255] to [-1, 1]."""
    arr = read_idx(path)
    if arr.ndim != 3:
        raise FormatError(f"{path} holds labels, not images", 0)
    images = arr.astype(np.float64)[:, None, :, :] / 127.5 - 1.0
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path} holds images, not labels", 0)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{labels.shape[0]} labels for {images.shape[0]} images", 4)
    return DatasetHandle(images, labels)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}.get(arr.ndim)
    if magic is None:
        raise DimensionError(f"IDX writer supports 1-D labels or 3-D images, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


# -- synthetic blobs --------------------------------------------------------


@dataclass(frozen=True)
class Mode:
    row: float
    col: float
    intensity: float = 2.0
    sigma: float = 1.5


@dataclass(frozen=True)
class SyntheticSpec:
    modes: tuple[Mode, ...]
    image_side: int = 15
    channels: int = 1
    samples_per_mode: int = 256
    seed: int = 0
    noise_std: float = 0.1
    background: float = -1.0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if not self.modes:
            raise ParameterError("synthetic spec needs at least one mode")
        for i, md in enumerate(self.modes):
            if not (0 <= md.row <= self.image_side - 1 and 0 <= md.col <= self.image_side - 1):
                raise ParameterError(f"mode {i} center ({md.row}, {md.col}) outside the image")
            if not md.sigma > 0:
                raise ParameterError(f"mode {i} has non-positive sigma {md.sigma}")
        if self.samples_per_mode < 1 or self.image_side < 1 or self.channels < 1:
            raise ParameterError("image_side, channels and samples_per_mode must be positive")


def blobs8(seed: int = 0, samples_per_mode: int = 256, sigma: float = 1.5) -> SyntheticSpec:
    """Eight blobs on the 3x3 lattice {3, 7, 11}^2 minus its center, 15x15 pixels."""
    centers = [(r, c) for r in (3, 7, 11) for c in (3, 7, 11) if (r, c) != (7, 7)]
    return SyntheticSpec(
        modes=tuple(Mode(r, c, 2.0, sigma) for r, c in centers),
        image_side=15,
        samples_per_mode=samples_per_mode,
        seed=seed,
    )


def mode_centroids(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free image of each mode, ``[K, C, H, W]``."""
    n = spec.image_side
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    out = np.empty((len(spec.modes), spec.channels, n, n))
    for i, md in enumerate(spec.modes):
        d2 = (rows - md.row) ** 2 + (cols - md.col) ** 2
        bump = np.exp(-d2 / (2.0 * md.sigma**2))
        out[i] = np.clip(spec.background + md.intensity * bump, -1.0, 1.0)
    return out


def make_synthetic(spec: SyntheticSpec) -> DatasetHandle:
    """Noisy copies of each mode image, clamped to [-1, 1]; labels are mode indices."""
    rng = make_rng(spec.seed)
    centroids = mode_centroids(spec)
    n_per = spec.samples_per_mode
    labels = np.repeat(np.arange(len(spec.modes)), n_per)
    noise = rng.normal(0.0, spec.noise_std, size=(labels.size,) + centroids.shape[1:])
    images = np.clip(centroids[labels] + noise, -1.0, 1.0)
    return DatasetHandle(images, labels)


def sample_batch(ds: DatasetHandle, b: int, rng: np.random.Generator) -> np.ndarray:
    """``b`` images drawn uniformly with replacement."""
    if b < 1:
        raise ParameterError(f"batch size must be >= 1, got {b}")
    if len(ds) == 0:
        raise ContractError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(ds), size=b)
    return ds.images[idx].copy()


# -- key=value spec files --------------------------------------------------


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse ``key = value`` lines; ``mode = row, col, intensity, sigma`` may repeat."""
    modes = []
    kw: dict = {}
    ints = {"image_side", "channels", "samples_per_mode", "seed"}
    floats = {"noise_std", "background"}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "mode":
                parts = [float(v) for v in value.split(",")]
                modes.append(Mode(*parts))
            elif key in ints:
                kw[key] = int(value)
            elif key in floats:
                kw[key] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
    return SyntheticSpec(modes=tuple(modes), **kw)


def format_synthetic_spec(spec: SyntheticSpec) -> str:
    lines = [
        f"image_side = {spec.image_side}",
        f"channels = {spec.channels}",
        f"samples_per_mode = {spec.samples_per_mode}",
        f"seed = {spec.seed}",
        f"noise_std = {spec.noise_std!r}",
        f"background = {spec.background!r}",
    ]
    lines += [f"mode = {m.row!r}, {m.col!r}, {m.intensity!r}, {m.sigma!r}" for m in spec.modes]
    return "\n".join(lines) + "\n"


@dataclass
class LoadedDataset:
    data: DatasetHandle
    spec: SyntheticSpec | None = None  # ground truth when synthetic
    source: str = ""
    extra: dict = field(default_factory=dict)


def load_dataset(source: str, labels_path: str | None = None, seed: int | None = None) -> LoadedDataset:
    """Resolve a dataset reference.

    ``blobs8`` (optionally ``blobs8:<samples_per_mode>``) builds the built-in
    eight-mode set. Otherwise ``source`` is a path whose leading bytes decide
    the format: IDX, ``SPGDATA1``, or a synthetic spec text file.
    """
    if source.startswith("blobs8"):
        _, _, n = source.partition(":")
        spec = blobs8(seed=0 if seed is None else seed, samples_per_mode=int(n) if n else 256)
        return LoadedDataset(make_synthetic(spec), spec, source)
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"dataset {source!r} not found")
    head = path.read_bytes()[:8]
    if head == serialize.DATA_MAGIC:
        images, labels = serialize.load_dataset_blocks(path)
        return LoadedDataset(DatasetHandle(images, labels), None, source)
    if len(head) >= 4 and struct.unpack(">I", head[:4])[0] in (IDX_IMAGES, IDX_LABELS):
        return LoadedDataset(load_idx(path, labels_path), None, source)
    spec = parse_synthetic_spec(path.read_text())
    return LoadedDataset(make_synthetic(spec), spec, source)
