"""Three-player adversarial training: critic, sparse generator, reconstructor.

One training iteration runs ``n_discr`` critic updates, one generator update
on the adversarial loss, and then ``n_reconst`` rounds of (refit the encoder
on generated pairs, update the generator on the reconstruction loss of real
images pushed through encoder and generator).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .config import Config
from .dataio import DatasetHandle, make_rng, sample_batch
from .dictionary import Dictionary
from .errors import ContractError, NumericError, TrainingDiagnosticError
from .networks import Critic, Encoder, Generator, ModelBundle, build_bundle, save_checkpoint
from .tensor import Tensor, backward, no_grad, softplus, sqrt, tsum

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_D", "L_G", "L_R", "gp_term", "wall_ms")


class NumericAbort(NumericError):
    """Raised when a loss turns non-finite; carries the rescue checkpoint path."""

    def __init__(self, message, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def latent(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.normal(size=(n, d))


def interpolate(x: np.ndarray, gz: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Points on the segment between each real and generated sample."""
    eps = np.asarray(eps, dtype=np.float64).reshape(-1, *([1] * (x.ndim - 1)))
    return eps * x + (1.0 - eps) * gz


def gradient_penalty(critic: Critic, x_hat, create_graph: bool = True) -> Tensor:
    """Per-sample ``(||grad_x D(x_hat)||_2 - 1)^2`` as an ``[N]`` tensor.

    The input gradient is taken with ``create_graph`` so that the penalty can
    be differentiated with respect to the critic parameters.
    """
    xh = Tensor(x_hat, requires_grad=True)
    scores = critic(xh)
    g = backward(scores.sum(), [xh], create_graph=create_graph)[xh]
    axes = tuple(range(1, g.ndim))
    norms = sqrt(tsum(g * g, axes))
    bad = np.flatnonzero(~np.isfinite(norms.data))
    if bad.size:
        raise NumericError(f"gradient norm is not finite for sample {int(bad[0])}")
    return (norms - 1.0).square()


@dataclass
class CriticLoss:
    loss: Tensor
    gp_term: float  # mean penalty before weighting; nan when no penalty is used


def critic_loss(
    x,
    z,
    bundle: ModelBundle,
    cfg: Config,
    *,
    eps=None,
    rng: np.random.Generator | None = None,
) -> CriticLoss:
    """Critic objective for ``cfg.loss_mode``; gradients reach only the critic."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape[0] != z.shape[0]:
        raise ContractError(f"real batch {x.shape[0]} and noise batch {z.shape[0]} differ")
    critic = bundle.critic
    with no_grad():
        gz = bundle.generator(z).data
    real = critic(x)
    fake = critic(gz)
    if cfg.loss_mode == "gan":
        return CriticLoss(softplus(-real).mean() + softplus(fake).mean(), math.nan)
    loss = fake.mean() - real.mean()
    if cfg.loss_mode == "wgan-clip":
        return CriticLoss(loss, math.nan)
    if eps is None:
        if rng is None:
            raise ContractError("critic_loss needs eps or rng in wgan-gp mode")
        eps = rng.uniform(0.0, 1.0, size=x.shape[0])
    pen = gradient_penalty(critic, interpolate(x, gz, eps)).mean()
    if cfg.lam_gp:
        loss = loss + pen * cfg.lam_gp
    return CriticLoss(loss, pen.item())


def penalty_grad_fd(critic: Critic, x_hat, step: float = 1e-5) -> dict:
    """Central finite-difference gradient of the mean penalty over every critic
    parameter entry. Slow; a cross-check for double backprop on tiny nets."""
    out = {}
    for p in critic.parameters():
        grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = gradient_penalty(critic, x_hat, create_graph=False).mean().item()
            flat[i] = orig - step
            down = gradient_penalty(critic, x_hat, create_graph=False).mean().item()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * step)
        out[p] = Tensor(grad)
    return out


def critic_grads(x, z, bundle: ModelBundle, cfg: Config, eps) -> tuple[dict, CriticLoss]:
    params = bundle.critic.parameters()
    if cfg.loss_mode == "wgan-gp" and cfg.gp_grad == "fd":
        base = critic_loss(x, z, bundle, cfg.replace(lam_gp=0.0), eps=eps)
        grads = dict(backward(base.loss, params))
        with no_grad():
            gz = bundle.generator(z).data
        x_hat = interpolate(np.asarray(x), gz, eps)
        fd = penalty_grad_fd(bundle.critic, x_hat)
        for p in params:
            grads[p] = Tensor(grads[p].data + cfg.lam_gp * fd[p].data)
        pen = gradient_penalty(bundle.critic, x_hat, create_graph=False).mean().item()
        return grads, CriticLoss(Tensor(base.loss.data + cfg.lam_gp * pen), pen)
    cl = critic_loss(x, z, bundle, cfg, eps=eps)
    return backward(cl.loss, params), cl


def generator_loss(z, bundle: ModelBundle, cfg: Config | None = None) -> Tensor:
    """Adversarial generator loss with the critic frozen."""
    with bundle.critic.frozen():
        scores = bundle.critic(bundle.generator(z))
    if cfg is not None and cfg.loss_mode == "gan":
        # minimax form: mean log(1 - sigmoid(D(G(z))))
        return -softplus(scores).mean()
    return -scores.mean()


def reconstructor_loss(x, bundle: ModelBundle) -> Tensor:
    """Mean squared reconstruction error ``||x - G(E(x))||^2`` with E frozen."""
    x = np.asarray(x, dtype=np.float64)
    with no_grad():
        zx = bundle.encoder(x).data
    diff = bundle.generator(zx) - x
    return tsum(diff * diff, tuple(range(1, x.ndim))).mean()


def encoder_loss(encoder: Encoder, images, z) -> Tensor:
    diff = encoder(images) - z
    return tsum(diff * diff, 1).mean()


@dataclass
class EncoderFit:
    initial: float
    final: float
    steps: int


def fit_encoder(bundle: ModelBundle, cfg: Config, rng: np.random.Generator) -> EncoderFit:
    """Fit the encoder as a left inverse of the frozen generator.

    Draws ``cfg.encoder_samples`` fresh latents, generates their images, and
    runs ``cfg.encoder_epochs`` passes of Adam over them in mini-batches of
    ``cfg.encoder_batch``, warm-starting from the current encoder. If the
    fitted loss ends above the starting loss the starting weights are
    restored.
    """
    enc = bundle.encoder
    n = cfg.encoder_samples
    if n == 0 or cfg.encoder_epochs == 0:
        return EncoderFit(math.nan, math.nan, 0)
    z = latent(rng, n, cfg.latent_dim)
    with no_grad():
        images = bundle.generator(z).data
        initial = encoder_loss(enc, images, z).item()
    start = enc.state_dict()
    opt = bundle.optimizers["encoder"]
    params = enc.parameters()
    steps = 0
    for _ in range(cfg.encoder_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.encoder_batch):
            idx = order[lo : lo + cfg.encoder_batch]
            loss = encoder_loss(enc, images[idx], z[idx])
            opt.step(backward(loss, params))
            steps += 1
    with no_grad():
        final = encoder_loss(enc, images, z).item()
    if not np.isfinite(final) or final > 10.0 * initial:
        raise TrainingDiagnosticError(f"encoder fit diverged: loss {initial:.4g} -> {final:.4g}")
    if final > initial:
        enc.load_state_dict(start)
        final = initial
    return EncoderFit(initial, final, steps)


def clip_weights(module, c: float) -> None:
    for p in module.parameters():
        np.clip(p.data, -c, c, out=p.data)


@dataclass
class IterationLog:
    iter: int
    L_D: float
    L_G: float
    L_R: float
    gp_term: float
    wall_ms: float

    def line(self) -> str:
        vals = [str(self.iter)] + [_fmt(v) for v in (self.L_D, self.L_G, self.L_R, self.gp_term)]
        return "\t".join(vals + [f"{self.wall_ms:.3f}"])


def _fmt(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else "nan"


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        for line in f:
            vals = line.rstrip("\n").split("\t")
            rows.append({k: (int(v) if k == "iter" else float(v)) for k, v in zip(header, vals)})
    return rows


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[IterationLog] = field(default_factory=list)


def _finite(value: float, name: str, it: int) -> float:
    if not math.isfinite(value):
        raise NumericError(f"{name} is {value} at iteration {it}")
    return value


def train_step(bundle: ModelBundle, data: DatasetHandle, cfg: Config, rng: np.random.Generator, it: int) -> IterationLog:
    t0 = time.perf_counter()
    b, d = cfg.batch_size, cfg.latent_dim
    critic_params = bundle.critic.parameters()
    gen_params = bundle.generator.parameters()
    opt = bundle.optimizers

    L_D = gp = math.nan
    for _ in range(cfg.n_discr):
        x = sample_batch(data, b, rng)
        z = latent(rng, b, d)
        eps = rng.uniform(0.0, 1.0, size=b)
        with bundle.generator.frozen(), bundle.encoder.frozen():
            grads, cl = critic_grads(x, z, bundle, cfg, eps)
        _finite(cl.loss.item(), "L_D", it)
        opt["critic"].step(grads)
        if cfg.loss_mode == "wgan-clip":
            clip_weights(bundle.critic, cfg.clip_c)
        L_D, gp = cl.loss.item(), cl.gp_term

    z = latent(rng, b, d)
    lg = generator_loss(z, bundle, cfg)
    L_G = _finite(lg.item(), "L_G", it)
    opt["generator"].step(backward(lg, gen_params))

    L_R = math.nan
    if cfg.reconstructor:
        for _ in range(cfg.n_reconst):
            fit_encoder(bundle, cfg, rng)
            x = sample_batch(data, b, rng)
            with bundle.critic.frozen():
                lr = reconstructor_loss(x, bundle)
            L_R = _finite(lr.item(), "L_R", it)
            opt["generator"].step(backward(lr, gen_params))
    return IterationLog(it, L_D, L_G, L_R, gp, (time.perf_counter() - t0) * 1000.0)


def train(
    data: DatasetHandle,
    cfg: Config,
    dictionary: Dictionary,
    *,
    out_dir: Path | str | None = None,
    bundle: ModelBundle | None = None,
    log_file: TextIO | None = None,
    progress: Callable[[IterationLog], None] | None = None,
) -> TrainResult:
    """Run ``cfg.iterations`` training iterations.

    Writes ``metrics.tsv`` and periodic checkpoints to ``out_dir`` when given.
    A non-finite loss restores the parameters from the start of the failing
    iteration, saves them to ``last_finite.spgckpt`` and raises
    :class:`NumericAbort`.
    """
    if bundle is None:
        bundle = build_bundle(cfg, dictionary, data.image_shape)
    rng = make_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    own_log = None
    if log_file is None and out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = own_log = open(out / "metrics.tsv", "w")
    result = TrainResult(bundle)
    try:
        if log_file is not None:
            log_file.write("\t".join(LOG_COLUMNS) + "\n")
        if out is not None and cfg.iterations == 0:
            save_checkpoint(out / "final.spgckpt", bundle)
        for it in range(cfg.iterations):
            before = bundle.snapshot()
            try:
                row = train_step(bundle, data, cfg, rng, it)
            except NumericError as err:
                bundle.restore(before)
                path = None
                if out is not None:
                    path = out / "last_finite.spgckpt"
                    save_checkpoint(path, bundle)
                raise NumericAbort(f"training stopped: {err}", path) from err
            result.log.append(row)
            if log_file is not None:
                log_file.write(row.line() + "\n")
            if progress is not None:
                progress(row)
            if out is not None:
                last = it == cfg.iterations - 1
                if last or (cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0):
                    save_checkpoint(out / ("final.spgckpt" if last else f"iter{it + 1:06d}.spgckpt"), bundle)
    finally:
        if own_log is not None:
            own_log.close()
    return result
