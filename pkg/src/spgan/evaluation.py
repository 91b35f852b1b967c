"""Sample-quality and diversity metrics for trained generators.

Everything here works on plain arrays of images ``[N, C, H, W]``; the
proxy classifier used by the inception-style score is a small CNN trained
on the labelled synthetic data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import conv2d, conv_output_size
from .dataio import DatasetHandle, make_rng
from .errors import ContractError, DimensionError
from .networks import Module, _down_kernel, _normal
from .optim import Adam
from .tensor import backward, log_softmax, matmul, no_grad, relu, tsum


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def pairwise_distances(a, b, chunk: int = 256) -> np.ndarray:
    """Exact Euclidean distances between the rows of ``a`` and ``b``."""
    a, b = _flat(a), _flat(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cannot compare samples of size {a.shape[1]} with {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        diff = a[lo : lo + chunk, None, :] - b[None, :, :]
        out[lo : lo + chunk] = np.sqrt(np.sum(diff * diff, axis=2))
    return out


# -- mode coverage ----------------------------------------------------------


@dataclass
class ModeReport:
    modes_total: int
    modes_covered: int
    counts: list[int]  # nearest-centroid assignments, all samples
    within: list[int]  # assignments that are also within tau
    high_quality_fraction: float
    tau: float

    def as_dict(self) -> dict:
        out = {
            "modes_total": self.modes_total,
            "modes_covered": self.modes_covered,
            "high_quality_fraction": self.high_quality_fraction,
            "tau": self.tau,
        }
        for i, (c, w) in enumerate(zip(self.counts, self.within)):
            out[f"mode{i}_count"] = c
            out[f"mode{i}_within"] = w
        return out


def mode_coverage(samples, centroids, tau: float) -> ModeReport:
    """Assign samples to their nearest centroid (ties go to the lower index).

    A mode counts as covered when at least ``max(1, 0.01 * N)`` of its
    assigned samples lie within ``tau`` of it.
    """
    if not tau > 0:
        raise ContractError(f"tau must be positive, got {tau}")
    s = _flat(samples)
    if s.shape[0] == 0:
        raise ContractError("mode coverage needs at least one sample")
    dist = pairwise_distances(s, centroids)
    k = dist.shape[1]
    nearest = np.argmin(dist, axis=1)
    close = dist[np.arange(len(s)), nearest] <= tau
    counts = np.bincount(nearest, minlength=k)
    within = np.bincount(nearest[close], minlength=k)
    need = max(1.0, 0.01 * len(s))
    return ModeReport(
        modes_total=k,
        modes_covered=int(np.sum(within >= need)),
        counts=[int(c) for c in counts],
        within=[int(c) for c in within],
        high_quality_fraction=float(close.mean()),
        tau=float(tau),
    )


# -- inception-style score --------------------------------------------------


def proxy_inception_score(class_probs) -> float:
    """``exp(mean_i KL(p_i || p_bar))`` over rows of a probability matrix."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError(f"class probabilities must be a non-empty N x K matrix, got {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("every row of class probabilities must be a probability vector")
    pbar = p.mean(axis=0)
    ratio = np.divide(p, pbar, out=np.ones_like(p), where=p > 0)
    kl = np.sum(np.where(p > 0, p * np.log(ratio), 0.0), axis=1)
    return float(np.exp(kl.mean()))


class ProxyClassifier(Module):
    """Two strided convolutions and a linear softmax head."""

    def __init__(self, image_shape, n_classes: int, channels: int = 8, seed: int = 0):
        super().__init__()
        rng = make_rng(seed)
        self.image_shape = tuple(image_shape)
        self.n_classes = n_classes
        c, h, _ = self.image_shape
        self.kernels = []
        c_in = c
        for i, c_out in enumerate((channels, channels * 2)):
            kern = _down_kernel(h)
            self.add_param(f"conv{i}.w", _normal(rng, (c_out, c_in, kern, kern), c_in * kern * kern, np.sqrt(2)))
            self.add_param(f"conv{i}.b", np.zeros(c_out))
            self.kernels.append(kern)
            h = conv_output_size(h, kern, 2, 1)
            c_in = c_out
        self.feat = c_in * h * h
        self.add_param("head.w", _normal(rng, (self.feat, n_classes), self.feat))
        self.add_param("head.b", np.zeros(n_classes))

    def forward(self, x):
        p = self.params
        h = x
        for i in range(len(self.kernels)):
            h = relu(conv2d(h, p[f"conv{i}.w"], 2, 1) + p[f"conv{i}.b"].reshape(1, -1, 1, 1))
        return matmul(h.reshape(h.shape[0], self.feat), p["head.w"]) + p["head.b"]

    def probabilities(self, images, chunk: int = 512) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = []
        with no_grad():
            for lo in range(0, len(images), chunk):
                out.append(np.exp(log_softmax(self(images[lo : lo + chunk]), 1).data))
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def accuracy(self, data: DatasetHandle) -> float:
        pred = np.argmax(self.probabilities(data.images), axis=1)
        return float(np.mean(pred == data.labels))


def train_classifier(data: DatasetHandle, epochs: int = 4, batch: int = 64, lr: float = 1e-3, seed: int = 0) -> ProxyClassifier:
    """Fit the proxy classifier on labelled images with softmax cross-entropy."""
    if data.labels is None:
        raise ContractError("the proxy classifier needs a labelled dataset")
    k = int(data.labels.max()) + 1
    clf = ProxyClassifier(data.image_shape, k, seed=seed)
    opt = Adam(clf.params, lr, 0.9, 0.999)
    rng = make_rng(seed + 1)
    onehot = np.eye(k)[data.labels]
    params = clf.parameters()
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for lo in range(0, len(order), batch):
            idx = order[lo : lo + batch]
            logp = log_softmax(clf(data.images[idx]), 1)
            loss = -tsum(logp * onehot[idx]) / len(idx)
            opt.step(backward(loss, params))
    return clf


# -- memorization -----------------------------------------------------------


@dataclass
class NearestNeighbors:
    distances: np.ndarray  # per sample, to its nearest training image
    index: np.ndarray
    mean: float
    min: float
    percentiles: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"nn_mean": self.mean, "nn_min": self.min}
        out.update({f"nn_p{q}": v for q, v in self.percentiles.items()})
        return out


def memorization_check(samples, training) -> NearestNeighbors:
    """Brute-force nearest training image for every sample."""
    s = np.asarray(samples, dtype=np.float64)
    t = np.asarray(training, dtype=np.float64)
    if s.shape[0] == 0 or t.shape[0] == 0:
        raise ContractError("memorization check needs non-empty sample and training sets")
    if s.shape[1:] != t.shape[1:]:
        raise DimensionError(f"sample shape {s.shape[1:]} != training shape {t.shape[1:]}")
    dist = pairwise_distances(s, t)
    idx = np.argmin(dist, axis=1)
    nn = dist[np.arange(len(s)), idx]
    pct = {q: float(np.percentile(nn, q)) for q in (5, 50, 95)}
    return NearestNeighbors(nn, idx, float(nn.mean()), float(nn.min()), pct)


@dataclass
class ScoreReport:
    proxy_inception: float
    recon_error: float
    nn_distance: float

    def as_dict(self) -> dict:
        return {
            "proxy_inception": self.proxy_inception,
            "recon_error": self.recon_error,
            "nn_distance": self.nn_distance,
        }


def reconstruction_error(images, bundle, chunk: int = 256) -> float:
    """Mean ``||x - G(E(x))||^2`` over ``images``."""
    images = np.asarray(images, dtype=np.float64)
    total = 0.0
    with no_grad():
        for lo in range(0, len(images), chunk):
            x = images[lo : lo + chunk]
            r = bundle.generator(bundle.encoder(x)).data
            total += float(np.sum((x - r) ** 2))
    return total / len(images)


# -- report text ------------------------------------------------------------


def _value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_report(values: dict) -> str:
    """``key: value`` lines."""
    return "".join(f"{k}: {_value(v)}\n" for k, v in values.items())


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, sep, val = line.partition(": ")
            if not sep:
                raise ContractError(f"malformed report line {line!r}")
            out[key] = val
    return out


def format_table(values: dict) -> str:
    """Two tab-separated lines: header and values."""
    return "\t".join(values) + "\n" + "\t".join(_value(v) for v in values.values()) + "\n"
