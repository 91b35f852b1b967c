"""Generator, critic and encoder networks, plus checkpoint I/O.

The generator maps a latent vector to a ``[k, grid_h, grid_w]`` map of patch
coefficients, shrinks every depth vector with a soft threshold, multiplies
the sparse vectors into a frozen dictionary and averages the resulting
patches into an image.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .config import Config
from .conv import conv2d, conv2d_transpose, conv_output_size
from .dictionary import Dictionary
from .errors import DimensionError, FormatError
from .optim import Adam
from .patches import PatchGeometry, assemble_image
from .tensor import Tensor, as_tensor, leaky_relu, matmul, relu, soft_threshold


class Module:
    """Holds named parameter tensors in insertion order."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise FormatError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise FormatError(f"parameter {k}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    @contextlib.contextmanager
    def frozen(self):
        """Stop recording gradients for this module's parameters inside the block."""
        flags = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = flags[k]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


def _down_kernel(n: int) -> int:
    # stride-2, pad-1 convolution with integer output: odd extents take 3x3, even 4x4
    return 3 if n % 2 else 4


def _check_images(x: Tensor, shape: tuple, who: str) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise DimensionError(f"{who} expects images of shape (N, {', '.join(map(str, shape))}), got {x.shape}")


@dataclass(frozen=True)
class ConvTSpec:
    c_in: int
    c_out: int
    kernel: int
    stride: int
    padding: int


def generator_layout(grid: int, base_channels: int, k: int, min_layers: int = 2) -> list[ConvTSpec]:
    """Transposed-convolution chain from a 4x4 map to a ``grid x grid`` map of ``k`` channels.

    Doubling layers (kernel 4, stride 2, padding 1) run while the extent can
    double without overshooting; a final stride-1 layer trims to the exact
    grid. Stride-1 3x3 layers are prepended until the chain has
    ``min_layers`` layers. Channels halve at every layer and the last layer
    emits ``k``.
    """
    steps = []
    cur = 4
    while cur * 2 <= grid:
        steps.append((4, 2, 1))
        cur *= 2
    if cur < grid:
        steps.append((grid - cur + 1, 1, 0))
    elif cur > grid:
        steps.append((grid + 1, 1, 2))
    while len(steps) < min_layers:
        steps.insert(0, (3, 1, 1))
    layout = []
    c = base_channels
    for i, (kern, s, p) in enumerate(steps):
        c_out = k if i == len(steps) - 1 else max(1, c // 2)
        layout.append(ConvTSpec(c, c_out, kern, s, p))
        c = c_out
    return layout


class Generator(Module):
    """Sparse-coefficient generator over a frozen dictionary."""

    def __init__(
        self,
        latent_dim: int,
        geometry: PatchGeometry,
        dictionary: Dictionary,
        lam_thresh: float = 0.05,
        base_channels: int = 64,
        min_layers: int = 2,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if dictionary.m != geometry.patch_dim:
            raise DimensionError(
                f"dictionary atoms have length {dictionary.m}, geometry needs {geometry.patch_dim}"
            )
        if geometry.grid_h != geometry.grid_w:
            raise DimensionError(f"generator needs a square patch grid, got {geometry.grid_h}x{geometry.grid_w}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.geometry = geometry
        self.dictionary = dictionary
        self.lam_thresh = float(lam_thresh)
        self.base_channels = base_channels
        self.layout = generator_layout(geometry.grid_h, base_channels, dictionary.k, min_layers)
        # frozen: never a gradient target
        self._atoms_t = Tensor(dictionary.atoms.T)
        width = base_channels * 16
        self.add_param("fc.w", _normal(rng, (latent_dim, width), latent_dim, np.sqrt(2)))
        self.add_param("fc.b", np.zeros(width))
        for i, spec in enumerate(self.layout):
            fan_in = spec.c_in * spec.kernel * spec.kernel / spec.stride**2
            gain = 1.0 if i == len(self.layout) - 1 else np.sqrt(2)
            self.add_param(f"convt{i}.w", _normal(rng, (spec.c_in, spec.c_out, spec.kernel, spec.kernel), fan_in, gain))
            self.add_param(f"convt{i}.b", np.zeros(spec.c_out))

    def coefficients(self, z) -> Tensor:
        """Thresholded coefficient map ``[N, k, grid_h, grid_w]``."""
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise DimensionError(f"latent batch must be (N, {self.latent_dim}), got {z.shape}")
        p = self.params
        h = relu(matmul(z, p["fc.w"]) + p["fc.b"])
        h = h.reshape(z.shape[0], self.base_channels, 4, 4)
        last = len(self.layout) - 1
        for i, spec in enumerate(self.layout):
            h = conv2d_transpose(h, p[f"convt{i}.w"], spec.stride, spec.padding)
            h = h + p[f"convt{i}.b"].reshape(1, spec.c_out, 1, 1)
            if i != last:
                h = relu(h)
        return soft_threshold(h, self.lam_thresh)

    def patches(self, codes: Tensor) -> Tensor:
        """Patch matrix ``[N, m, s]`` from a coefficient map."""
        n, k, gh, gw = codes.shape
        # column j * gh + i of the patch matrix is grid cell (i, j)
        flat = codes.transpose(0, 3, 2, 1).reshape(n * gh * gw, k)
        P = matmul(flat, self._atoms_t)
        return P.reshape(n, gw * gh, self.dictionary.m).transpose(0, 2, 1)

    def forward(self, z, return_codes: bool = False):
        codes = self.coefficients(z)
        img = assemble_image(self.patches(codes), self.geometry)
        return (img, codes) if return_codes else img


class Critic(Module):
    """Strided convolutions with leaky ReLU and a linear scalar head. No
    normalization layers, so the gradient penalty stays per-sample."""

    def __init__(
        self,
        image_shape: tuple[int, int, int],
        channels: int = 16,
        n_layers: int = 2,
        slope: float = 0.2,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_shape = tuple(image_shape)
        self.slope = slope
        self.kernels = []
        c, h, w = self.image_shape
        c_in = c
        for i in range(n_layers):
            if h != w:
                raise DimensionError("critic expects square images")
            kern = _down_kernel(h)
            c_out = channels * 2**i
            self.add_param(f"conv{i}.w", _normal(rng, (c_out, c_in, kern, kern), c_in * kern * kern, np.sqrt(2)))
            self.add_param(f"conv{i}.b", np.zeros(c_out))
            self.kernels.append(kern)
            h = w = conv_output_size(h, kern, 2, 1)
            c_in = c_out
        self.feat = c_in * h * w
        self.add_param("head.w", _normal(rng, (self.feat, 1), self.feat))
        self.add_param("head.b", np.zeros(1))

    def zero_head(self) -> None:
        self.params["head.w"].data[...] = 0.0
        self.params["head.b"].data[...] = 0.0

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        _check_images(x, self.image_shape, "critic")
        p = self.params
        h = x
        for i in range(len(self.kernels)):
            h = conv2d(h, p[f"conv{i}.w"], 2, 1) + p[f"conv{i}.b"].reshape(1, -1, 1, 1)
            h = leaky_relu(h, self.slope)
        return matmul(h.reshape(x.shape[0], self.feat), p["head.w"]) + p["head.b"]


class Encoder(Module):
    """Residual CNN mapping images back to latent vectors.

    A stride-2 stem halves the resolution, ``blocks`` residual blocks
    (two 3x3 convolutions each) follow, and a linear head emits ``latent_dim``.
    """

    def __init__(
        self,
        image_shape: tuple[int, int, int],
        latent_dim: int,
        channels: int = 16,
        blocks: int = 6,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        self.blocks = blocks
        c, h, w = self.image_shape
        if h != w:
            raise DimensionError("encoder expects square images")
        self.stem_kernel = _down_kernel(h)
        self.add_param("stem.w", _normal(rng, (channels, c, self.stem_kernel, self.stem_kernel), c * self.stem_kernel**2, np.sqrt(2)))
        self.add_param("stem.b", np.zeros(channels))
        fan = channels * 9
        for i in range(blocks):
            self.add_param(f"block{i}.w1", _normal(rng, (channels, channels, 3, 3), fan, np.sqrt(2)))
            self.add_param(f"block{i}.b1", np.zeros(channels))
            # small residual branch at init keeps deep stacks near identity
            self.add_param(f"block{i}.w2", _normal(rng, (channels, channels, 3, 3), fan, 0.1))
            self.add_param(f"block{i}.b2", np.zeros(channels))
        h = conv_output_size(h, self.stem_kernel, 2, 1)
        self.feat = channels * h * h
        self.add_param("head.w", _normal(rng, (self.feat, latent_dim), self.feat))
        self.add_param("head.b", np.zeros(latent_dim))

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        _check_images(x, self.image_shape, "encoder")
        p = self.params
        h = relu(conv2d(x, p["stem.w"], 2, 1) + p["stem.b"].reshape(1, -1, 1, 1))
        for i in range(self.blocks):
            r = relu(conv2d(h, p[f"block{i}.w1"], 1, 1) + p[f"block{i}.b1"].reshape(1, -1, 1, 1))
            r = conv2d(r, p[f"block{i}.w2"], 1, 1) + p[f"block{i}.b2"].reshape(1, -1, 1, 1)
            h = relu(h + r)
        return matmul(h.reshape(x.shape[0], self.feat), p["head.w"]) + p["head.b"]


# -- convenience front ends -------------------------------------------------


def generate(z, gen: Generator) -> Tensor:
    return gen(z)


def criticize(x, critic: Critic) -> Tensor:
    return critic(x)


def encode(x, enc: Encoder) -> Tensor:
    return enc(x)


def generation_geometry(cfg: Config, image_shape: tuple[int, int, int]) -> PatchGeometry:
    c, h, w = image_shape
    return PatchGeometry(h, w, c, cfg.patch, cfg.generation_stride)


@dataclass
class ModelBundle:
    """Parameters of all three players plus their optimizer states."""

    generator: Generator
    critic: Critic
    encoder: Encoder
    optimizers: dict[str, Adam] = field(default_factory=dict)
    config: Config = field(default_factory=Config)

    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            "generator": self.generator.state_dict(),
            "critic": self.critic.state_dict(),
            "encoder": self.encoder.state_dict(),
            **{f"optim.{k}": opt.state_dict() for k, opt in self.optimizers.items()},
        }

    def restore(self, snap: dict[str, dict[str, np.ndarray]]) -> None:
        self.generator.load_state_dict(snap["generator"])
        self.critic.load_state_dict(snap["critic"])
        self.encoder.load_state_dict(snap["encoder"])
        for k, opt in self.optimizers.items():
            opt.load_state_dict(snap[f"optim.{k}"])


def build_bundle(cfg: Config, dictionary: Dictionary, image_shape: tuple[int, int, int]) -> ModelBundle:
    """Freshly initialized networks and optimizers, seeded from ``cfg.seed``."""
    from .dataio import make_rng

    geom = generation_geometry(cfg, image_shape)
    base = max(1, cfg.gen_base_channels // cfg.channel_divisor)
    gen = Generator(cfg.latent_dim, geom, dictionary, cfg.lam_thresh, base, cfg.gen_min_layers, make_rng(cfg.seed * 3 + 1))
    critic = Critic(image_shape, cfg.critic_channels, cfg.critic_layers, rng=make_rng(cfg.seed * 3 + 2))
    enc = Encoder(image_shape, cfg.latent_dim, cfg.encoder_channels, cfg.encoder_blocks, make_rng(cfg.seed * 3 + 3))
    opts = {
        "generator": Adam(gen.params, cfg.lr_g, cfg.beta1, cfg.beta2),
        "critic": Adam(critic.params, cfg.lr_d, cfg.beta1, cfg.beta2),
        "encoder": Adam(enc.params, cfg.lr_e, cfg.beta1, cfg.beta2),
    }
    return ModelBundle(gen, critic, enc, opts, cfg)


def save_checkpoint(path, bundle: ModelBundle) -> None:
    """Write an ``SPGCKPT1`` file holding all networks, optimizer states,
    the frozen dictionary and the full config (with its SHA-256)."""
    gen = bundle.generator
    sections = {
        "generator": {**bundle.generator.state_dict(), "dictionary": gen.dictionary.atoms,
                      "image_shape": np.array(gen.geometry.image_shape, dtype=np.float64)},
        "critic": bundle.critic.state_dict(),
        "encoder": bundle.encoder.state_dict(),
        "optimizer": {
            f"{name}.{k}": v for name, opt in bundle.optimizers.items() for k, v in opt.state_dict().items()
        },
        "config": {
            bundle.config.to_text(): np.frombuffer(bytes.fromhex(bundle.config.digest()), dtype=np.uint8).astype(np.float64)
        },
    }
    serialize.save_sections(path, sections)


def load_checkpoint(path, overrides: dict | None = None) -> ModelBundle:
    """Rebuild a bundle from disk. ``overrides`` replaces config fields that do
    not change parameter shapes (e.g. ``lam_thresh``)."""
    from .config import parse_config

    sections = serialize.load_sections(path)
    for name in ("generator", "critic", "encoder", "optimizer", "config"):
        if name not in sections:
            raise FormatError(f"checkpoint lacks section {name!r}")
    (text, digest), = sections["config"].items()
    cfg = parse_config(text, "checkpoint")
    if bytes(digest.astype(np.uint8)).hex() != cfg.digest():
        raise FormatError("checkpoint config hash mismatch")
    if overrides:
        cfg = cfg.replace(**overrides)
    gsec = dict(sections["generator"])
    dictionary = Dictionary(gsec.pop("dictionary"))
    image_shape = tuple(int(v) for v in gsec.pop("image_shape"))
    bundle = build_bundle(cfg, dictionary, image_shape)
    bundle.generator.load_state_dict(gsec)
    bundle.critic.load_state_dict(sections["critic"])
    bundle.encoder.load_state_dict(sections["encoder"])
    opt_state = sections["optimizer"]
    for name, opt in bundle.optimizers.items():
        prefix = f"{name}."
        sub = {k[len(prefix):]: v for k, v in opt_state.items() if k.startswith(prefix)}
        if sub:
            opt.load_state_dict(sub)
    return bundle
