"""Flat ``key = value`` configuration shared by every command.

One dataclass holds every knob. Files and ``--set`` overrides are parsed
against its fields; unknown keys are errors so typos cannot silently fall
back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from typing import Iterable

from .errors import ConfigError

LOSS_MODES = ("gan", "wgan-clip", "wgan-gp")
GP_GRAD_MODES = ("autodiff", "fd")


@dataclass
class Config:
    # data
    dataset: str = "blobs8"
    labels: str = ""
    data_seed: int = 0

    # patch geometry
    patch: int = 3
    dict_stride: int = 1
    gen_stride: int = 0  # 0 -> equal to patch (non-overlapping)

    # dictionary
    dict_atoms: int = 24
    lam1: float = 0.1
    dict_epochs: int = 2
    dict_batch: int = 256
    dict_code_iters: int = 200
    dict_max_patches: int = 20000
    dict_mean_removal: bool = False
    dict_path: str = ""

    # networks
    latent_dim: int = 8
    gen_base_channels: int = 1024
    channel_divisor: int = 16
    gen_min_layers: int = 2
    lam_thresh: float = 0.05
    critic_channels: int = 16
    critic_layers: int = 2
    encoder_channels: int = 8
    encoder_blocks: int = 6

    # training
    loss_mode: str = "wgan-gp"
    batch_size: int = 32
    n_discr: int = 5
    n_reconst: int = 1
    reconstructor: bool = True
    lam_gp: float = 10.0
    clip_c: float = 0.01
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    lr_e: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    encoder_samples: int = 32
    encoder_batch: int = 32
    encoder_epochs: int = 1
    iterations: int = 2000
    checkpoint_every: int = 500
    seed: int = 0
    gp_grad: str = "autodiff"

    # evaluation
    tau: float = 0.0  # 0 -> three times the blob sigma
    eval_samples: int = 1000
    classifier_epochs: int = 4
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        counts = (
            "patch", "dict_stride", "dict_atoms", "dict_batch", "dict_code_iters",
            "dict_max_patches", "latent_dim", "gen_base_channels", "channel_divisor",
            "critic_channels", "critic_layers", "encoder_channels", "batch_size",
            "n_discr", "n_reconst", "encoder_batch", "threads", "eval_samples",
        )
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        nonneg = (
            "gen_stride", "dict_epochs", "encoder_samples", "encoder_epochs",
            "iterations", "checkpoint_every", "encoder_blocks", "classifier_epochs",
            "gen_min_layers",
        )
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.gp_grad not in GP_GRAD_MODES:
            raise ConfigError(f"gp_grad must be one of {GP_GRAD_MODES}, got {self.gp_grad!r}")
        if self.lam_gp < 0:
            raise ConfigError("lam_gp must be >= 0")
        if not self.clip_c > 0:
            raise ConfigError("clip_c must be > 0")
        if not self.lam1 > 0:
            raise ConfigError("lam1 must be > 0")
        if self.lam_thresh < 0 or self.tau < 0:
            raise ConfigError("lam_thresh and tau must be >= 0")
        for name in ("lr_g", "lr_d", "lr_e"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")

    @property
    def generation_stride(self) -> int:
        return self.gen_stride or self.patch

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad {kind} value for {key!r}: {raw!r}") from None
    return raw


def parse_pairs(lines: Iterable[str], origin: str = "config") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_config(text: str, origin: str = "config") -> Config:
    return Config(**parse_pairs(text.splitlines(), origin))


def load_config(path=None, overrides: Iterable[str] = ()) -> Config:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides in order."""
    values: dict = {}
    if path:
        try:
            with open(path) as f:
                values.update(parse_pairs(f, str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values.update(parse_pairs(overrides, "--set"))
    return Config(**values)
