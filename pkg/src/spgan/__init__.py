"""Sparse-dictionary GAN with a gradient-penalty critic and an encoder reconstructor."""

from .config import Config, load_config
from .dictionary import Dictionary, sparse_code, train_dictionary
from .errors import SpganError
from .patches import PatchGeometry, assemble_image, extract_patches
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Config",
    "Dictionary",
    "PatchGeometry",
    "SpganError",
    "Tensor",
    "assemble_image",
    "backward",
    "extract_patches",
    "load_config",
    "no_grad",
    "sparse_code",
    "train_dictionary",
]

__version__ = "0.1.0"
