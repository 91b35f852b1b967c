"""Patch dictionary learning with an L1 sparsity penalty.

The learned dictionary minimizes ``0.5 * ||G - W R||_F^2 + lam1 * ||R||_1``
over unit-norm columns ``W`` and codes ``R``, where ``G`` holds vectorized
training patches as columns. Codes are found with ISTA; the dictionary is
updated online from accumulated sufficient statistics by block coordinate
descent over its columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    ContractError,
    DegenerateStatisticsError,
    DimensionError,
    InitializationError,
    NumericError,
    ParameterError,
)
from . import serialize

logger = logging.getLogger(__name__)

NORM_TOL = 1e-6
ACTIVE_EPS = 1e-8


def _shrink(x: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


class Dictionary:
    """An ``m x k`` matrix of unit-norm atoms.

    Construct with already-normalized atoms; use :meth:`from_raw` to
    normalize arbitrary columns.
    """

    def __init__(self, atoms):
        atoms = np.array(atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise DimensionError(f"dictionary must be 2-D, got shape {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise NumericError("dictionary has non-finite entries")
        check_normalized(atoms)
        self.atoms = atoms
        self.atoms.setflags(write=False)

    @classmethod
    def from_raw(cls, raw) -> Dictionary:
        raw = np.asarray(raw, dtype=np.float64)
        norms = np.linalg.norm(raw, axis=0)
        if np.any(norms == 0):
            raise ContractError("cannot normalize a zero column")
        return cls(raw / norms)

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.atoms.shape

    def save(self, path) -> None:
        serialize.save_dictionary(path, self.atoms)

    @classmethod
    def load(cls, path) -> Dictionary:
        return cls(serialize.load_dictionary(path))

    def __repr__(self):
        return f"Dictionary(m={self.m}, k={self.k})"


def check_normalized(atoms: np.ndarray, tol: float = NORM_TOL) -> None:
    norms = np.linalg.norm(atoms, axis=0)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ContractError(
            f"dictionary columns {bad[:5].tolist()} are not unit norm "
            f"(norms {norms[bad[:5]].round(8).tolist()})"
        )


def _atoms(omega) -> np.ndarray:
    return omega.atoms if isinstance(omega, Dictionary) else np.asarray(omega, dtype=np.float64)


def dict_objective(G, omega, R, lam1: float) -> float:
    """``0.5 * ||G - omega @ R||_F^2 + lam1 * ||R||_1``."""
    W = _atoms(omega)
    G = np.asarray(G, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    if R.ndim == 1:
        R = R[:, None]
    if W.shape[0] != G.shape[0] or W.shape[1] != R.shape[0] or G.shape[1] != R.shape[1]:
        raise DimensionError(
            f"inconsistent shapes: patches {G.shape}, dictionary {W.shape}, codes {R.shape}"
        )
    resid = G - W @ R
    return 0.5 * float(np.sum(resid * resid)) + lam1 * float(np.sum(np.abs(R)))


def lipschitz_constant(W: np.ndarray, max_iter: int = 1000, rtol: float = 1e-12, block: int = 8) -> float:
    """Largest eigenvalue of ``W.T @ W`` by block power iteration.

    Iterating a small block with a Rayleigh-Ritz step converges even when the
    top few eigenvalues nearly tie, which is common for well-spread atoms.
    """
    gram = W.T @ W
    k = gram.shape[0]
    b = min(block, k)
    V = np.linalg.qr(np.random.Generator(np.random.Philox(0)).normal(size=(k, b)))[0]
    prev = None
    for _ in range(max_iter):
        V = np.linalg.qr(gram @ V)[0]
        theta = float(np.linalg.eigvalsh(V.T @ gram @ V)[-1])
        if prev is not None and abs(theta - prev) <= rtol * theta:
            return theta
        prev = theta
    raise NumericError(f"power iteration did not converge in {max_iter} steps")


def sparse_code(
    g,
    omega,
    lam1: float,
    max_iter: int = 1000,
    tol: float = 1e-10,
    *,
    L: float | None = None,
    return_history: bool = False,
):
    """Solve ``min_r 0.5 ||g - W r||^2 + lam1 ||r||_1`` with ISTA.

    ``g`` may be a single patch vector or an ``[m, s]`` matrix of patches
    coded jointly (iteration stops when every column's objective decrease
    falls below ``tol``). With ``return_history`` the per-iteration total
    objective is returned as well.
    """
    if not lam1 > 0:
        raise ParameterError(f"lam1 must be positive, got {lam1}")
    W = _atoms(omega)
    check_normalized(W)
    G = np.asarray(g, dtype=np.float64)
    single = G.ndim == 1
    if single:
        G = G[:, None]
    if G.shape[0] != W.shape[0]:
        raise DimensionError(f"patch length {G.shape[0]} != dictionary rows {W.shape[0]}")
    if L is None:
        L = lipschitz_constant(W)
    step = 1.0 / L
    WtG = W.T @ G
    gram = W.T @ W
    R = np.zeros((W.shape[1], G.shape[1]))

    def col_obj(R):
        resid = G - W @ R
        return 0.5 * np.sum(resid * resid, axis=0) + lam1 * np.sum(np.abs(R), axis=0)

    obj = col_obj(R)
    history = [float(obj.sum())]
    for _ in range(max_iter):
        R_new = _shrink(R - step * (gram @ R - WtG), lam1 * step)
        new_obj = col_obj(R_new)
        decrease = obj - new_obj
        stalled = np.array_equal(R_new, R)
        R, obj = R_new, new_obj
        history.append(float(obj.sum()))
        if stalled or np.all(decrease < tol):
            break
    R = R[:, 0] if single else R
    return (R, history) if return_history else R


def dict_update(
    omega,
    stats_A: np.ndarray,
    stats_B: np.ndarray,
    *,
    rng: np.random.Generator | None = None,
    patches: np.ndarray | None = None,
    eps: float = 1e-12,
) -> Dictionary:
    """One pass of block coordinate descent over the dictionary columns.

    ``stats_A`` accumulates ``r r^T`` and ``stats_B`` accumulates ``g r^T``.
    Each column is set to the minimizer of the quadratic surrogate on the
    unit sphere. Columns with no usage (``A_jj < eps``) are re-seeded from a
    random training patch when ``patches`` is given.
    """
    W = _atoms(omega).copy()
    A = np.asarray(stats_A, dtype=np.float64)
    B = np.asarray(stats_B, dtype=np.float64)
    m, k = W.shape
    if A.shape != (k, k) or B.shape != (m, k):
        raise DimensionError(f"statistics shapes {A.shape}, {B.shape} do not match dictionary {W.shape}")
    diag = np.diag(A)
    if np.all(diag < eps):
        raise DegenerateStatisticsError("every atom has vanishing usage statistics")
    for j in range(k):
        if diag[j] < eps:
            W[:, j] = _reseed(W, j, rng, patches)
            continue
        u = (B[:, j] - W @ A[:, j]) / diag[j] + W[:, j]
        nrm = np.linalg.norm(u)
        W[:, j] = u / nrm if nrm > 0 else _reseed(W, j, rng, patches)
    return Dictionary(W)


def _reseed(W, j, rng, patches) -> np.ndarray:
    if patches is None or rng is None:
        return W[:, j]
    norms = np.linalg.norm(patches, axis=0)
    candidates = np.flatnonzero(norms > 0)
    if candidates.size == 0:
        return W[:, j]
    pick = candidates[rng.integers(candidates.size)]
    return patches[:, pick] / norms[pick]


def _replace_duplicates(W, A, B, batch, R, max_coherence):
    """Swap atoms nearly parallel to an earlier atom for the worst-coded patch
    of the batch, clearing their statistics. Without this a random start that
    draws two patches from one direction never finds the direction it missed."""
    atoms = W.atoms.copy()
    k = atoms.shape[1]
    resid = np.linalg.norm(batch - W.atoms @ R, axis=0)
    taken = set()
    changed = False
    for j in range(1, k):
        if np.max(np.abs(atoms[:, :j].T @ atoms[:, j])) <= max_coherence:
            continue
        order = [i for i in np.argsort(-resid, kind="stable") if i not in taken and resid[i] > 0]
        if not order:
            break
        i = order[0]
        taken.add(i)
        atoms[:, j] = batch[:, i] / np.linalg.norm(batch[:, i])
        A[j, :] = 0.0
        A[:, j] = 0.0
        B[:, j] = 0.0
        changed = True
    return (Dictionary(atoms) if changed else W), A, B


@dataclass
class DictionaryTrainLog:
    """Per-batch coding objective recorded during training."""

    objectives: list[float] = field(default_factory=list)


def _init_atoms(patches: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    norms = np.linalg.norm(patches, axis=0)
    usable = np.flatnonzero(norms > 0)
    normalized = patches[:, usable] / norms[usable]
    # an atom and its negation span the same line; count them once
    lead = np.argmax(np.abs(normalized) > 1e-12, axis=0)
    canon = normalized * np.sign(normalized[lead, np.arange(normalized.shape[1])])
    uniq, first = np.unique(np.round(canon, 12), axis=1, return_index=True)
    if uniq.shape[1] < k:
        raise InitializationError(f"need {k} distinct nonzero patches, found {uniq.shape[1]}")
    order = np.sort(first)
    pick = rng.choice(order, size=k, replace=False)
    return normalized[:, np.sort(pick)]


def train_dictionary(
    patches,
    k: int,
    lam1: float = 0.1,
    epochs: int = 1,
    seed: int = 0,
    *,
    batch_size: int = 256,
    forget: float = 0.9,
    code_iters: int = 200,
    code_tol: float = 1e-8,
    mean_removal: bool = False,
    max_coherence: float = 0.99,
    log: DictionaryTrainLog | None = None,
) -> Dictionary:
    """Learn a ``m x k`` dictionary from patch columns.

    ``patches`` is an ``[m, s]`` matrix or an iterable of such matrices
    (concatenated before training). Atoms start as ``k`` random distinct
    normalized patches; each epoch visits the patches in a seeded random
    order in mini-batches of ``batch_size``, coding each batch, folding the
    codes into decayed statistics (factor ``forget`` per batch) and updating
    every atom once. An atom whose absolute cosine with an earlier atom
    exceeds ``max_coherence`` after an update is replaced by the batch patch
    with the largest coding residual before the batch is accumulated.
    """
    from .dataio import make_rng

    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if not isinstance(patches, np.ndarray):
        parts = [np.asarray(p, dtype=np.float64) for p in patches]
        if not parts:
            raise ContractError("patch stream is empty")
        patches = np.concatenate(parts, axis=1)
    G = np.asarray(patches, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] == 0:
        raise ContractError(f"patch matrix must be non-empty [m, s], got shape {G.shape}")
    if mean_removal:
        G = G - G.mean(axis=0, keepdims=True)
    rng = make_rng(seed)
    W = Dictionary(_init_atoms(G, k, rng))
    m, s = G.shape
    A = np.zeros((k, k))
    B = np.zeros((m, k))
    for epoch in range(epochs):
        order = rng.permutation(s)
        for start in range(0, s, batch_size):
            batch = G[:, order[start : start + batch_size]]
            R = sparse_code(batch, W, lam1, max_iter=code_iters, tol=code_tol, L=lipschitz_constant(W.atoms))
            swapped, A, B = _replace_duplicates(W, A, B, batch, R, max_coherence)
            if swapped is not W:
                W = swapped
                R = sparse_code(batch, W, lam1, max_iter=code_iters, tol=code_tol, L=lipschitz_constant(W.atoms))
            if log is not None:
                log.objectives.append(dict_objective(batch, W, R, lam1))
            A = forget * A + R @ R.T
            B = forget * B + batch @ R.T
            W = dict_update(W, A, B, rng=rng, patches=batch)
        logger.debug("dictionary epoch %d done", epoch)
    return W
