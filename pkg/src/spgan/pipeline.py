"""Glue shared by the CLI and the acceptance runs: dictionary fitting from a
dataset and the end-to-end toy experiment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .dataio import DatasetHandle, make_rng
from .dictionary import Dictionary, DictionaryTrainLog, train_dictionary
from .patches import PatchGeometry, extract_patches


def dictionary_geometry(cfg: Config, image_shape) -> PatchGeometry:
    c, h, w = image_shape
    return PatchGeometry(h, w, c, cfg.patch, cfg.dict_stride)


def dictionary_patches(data: DatasetHandle, cfg: Config) -> np.ndarray:
    """All training patches as an ``[m, s]`` matrix, subsampled (seeded) to at
    most ``cfg.dict_max_patches`` columns."""
    geom = dictionary_geometry(cfg, data.image_shape)
    P = extract_patches(data.images, geom)  # [N, m, s]
    G = P.transpose(1, 0, 2).reshape(geom.patch_dim, -1)
    if G.shape[1] > cfg.dict_max_patches:
        rng = make_rng(cfg.data_seed + 7919)
        G = G[:, np.sort(rng.choice(G.shape[1], cfg.dict_max_patches, replace=False))]
    return G


def fit_dictionary(data: DatasetHandle, cfg: Config, log: DictionaryTrainLog | None = None) -> Dictionary:
    return train_dictionary(
        dictionary_patches(data, cfg),
        cfg.dict_atoms,
        cfg.lam1,
        cfg.dict_epochs,
        cfg.seed,
        batch_size=cfg.dict_batch,
        code_iters=cfg.dict_code_iters,
        mean_removal=cfg.dict_mean_removal,
        log=log,
    )
