"""Command-line entry point: ``spgan <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 gradcheck failure, 2 configuration or input
error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, plotting
from .config import Config, load_config, parse_pairs
from .dataio import load_dataset, make_rng, make_synthetic, mode_centroids
from .dictionary import Dictionary, DictionaryTrainLog
from .errors import ContractError, NumericError, SpganError
from .networks import load_checkpoint
from .pipeline import fit_dictionary
from .tensor import no_grad
from .trainer import NumericAbort, read_metrics, train

log = logging.getLogger("spgan")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable, last wins")
    p.add_argument("--out", default=None, help="output directory (default runs/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train-dict", help="learn the patch dictionary"))

    p = sub.add_parser("train", help="adversarial training with the reconstructor")
    _common(p)
    p.add_argument("--dictionary", help="dictionary file (overrides dict_path)")

    p = sub.add_parser("sample", help="draw images from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("reconstruct", help="encode and regenerate dataset images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=16)

    p = sub.add_parser("eval", help="mode coverage, proxy score and memorization reports")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-proxy", action="store_true", help="skip the classifier-based score")

    p = sub.add_parser("gradcheck", help="finite-difference and adjoint checks")
    _common(p)
    p.add_argument("--select", default=None,
                   help="comma-separated suites or op names; empty string runs nothing")
    p.add_argument("--instances", type=int, default=None)
    return parser


def _outdir(args) -> Path:
    out = Path(args.out or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: Config, out: Path) -> None:
    (out / "config.txt").write_text(cfg.to_text())


def _thread_limit(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def _dataset(cfg: Config):
    return load_dataset(cfg.dataset, cfg.labels or None, cfg.data_seed)


def cmd_train_dict(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = _outdir(args)
    _echo_config(cfg, out)
    ds = _dataset(cfg).data
    tlog = DictionaryTrainLog()
    D = fit_dictionary(ds, cfg, tlog)
    path = out / "dictionary.spgdict"
    D.save(path)
    with open(out / "dict_log.tsv", "w") as f:
        f.write("batch\tobjective\n")
        f.writelines(f"{i}\t{v!r}\n" for i, v in enumerate(tlog.objectives))
    if tlog.objectives:
        plotting.plot_dictionary_objective(tlog.objectives, out / "dict_objective.png")
    print(f"dictionary: {path} ({D.m}x{D.k})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.dictionary:
        cfg = cfg.replace(dict_path=args.dictionary)
    out = _outdir(args)
    _echo_config(cfg, out)
    if not cfg.dict_path:
        raise FileNotFoundError("no dictionary given; run train-dict and pass --dictionary or set dict_path")
    D = Dictionary.load(cfg.dict_path)
    ds = _dataset(cfg).data
    try:
        train(ds, cfg, D, out_dir=out)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        if exc.checkpoint is not None:
            print(f"last finite checkpoint: {exc.checkpoint}")
        return EXIT_NUMERIC
    rows = read_metrics(out / "metrics.tsv")
    if rows:
        plotting.plot_losses(rows, out / "losses.png")
    print(f"checkpoint: {out / 'final.spgckpt'}")
    return EXIT_OK


def _load(args):
    overrides = {}
    if args.config:
        with open(args.config) as f:
            overrides.update(parse_pairs(f, args.config))
    overrides.update(parse_pairs(args.overrides, "--set"))
    return load_checkpoint(args.checkpoint, overrides)


def _samples(bundle, n: int, seed: int) -> np.ndarray:
    z = make_rng(seed).normal(size=(n, bundle.config.latent_dim))
    with no_grad():
        return bundle.generator(z).data


def cmd_sample(args) -> int:
    bundle = _load(args)
    out = _outdir(args)
    _echo_config(bundle.config, out)
    imgs = _samples(bundle, args.n, args.seed)
    ext = "pgm" if imgs.shape[1] == 1 else "ppm"
    for i, img in enumerate(imgs):
        plotting.write_pnm(out / f"sample_{i:04d}.{ext}", img)
    plotting.write_pnm(out / f"grid.{ext}", plotting.image_grid(imgs))
    plotting.plot_samples(imgs, out / "samples.png")
    print(f"wrote {len(imgs)} samples to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    bundle = _load(args)
    cfg = bundle.config
    out = _outdir(args)
    _echo_config(cfg, out)
    x = _dataset(cfg).data.images[: args.n]
    with no_grad():
        r = bundle.generator(bundle.encoder(x)).data
    pairs = np.stack([x, r], axis=1).reshape((-1,) + x.shape[1:])
    ext = "pgm" if x.shape[1] == 1 else "ppm"
    plotting.write_pnm(out / f"pairs.{ext}", plotting.image_grid(pairs, cols=2))
    plotting.plot_samples(pairs, out / "pairs.png", cols=2)
    err = evaluation.reconstruction_error(x, bundle)
    (out / "recon_report.txt").write_text(evaluation.format_report({"n": len(x), "recon_error": err}))
    print(f"recon_error: {err!r}")
    return EXIT_OK


def heldout_images(loaded, cfg: Config) -> np.ndarray:
    """Fresh draws from the generating spec when synthetic, else the last tenth of the data."""
    if loaded.spec is not None:
        spec = loaded.spec
        fresh = type(spec)(spec.modes, spec.image_side, spec.channels, spec.samples_per_mode, spec.seed + 1000,
                           spec.noise_std, spec.background)
        return make_synthetic(fresh).images
    images = loaded.data.images
    return images[-max(1, len(images) // 10):]


def blob_tau(cfg: Config, spec) -> float:
    if cfg.tau > 0:
        return cfg.tau
    return 3.0 * max(md.sigma for md in spec.modes)


def cmd_eval(args) -> int:
    bundle = _load(args)
    cfg = bundle.config
    out = _outdir(args)
    _echo_config(cfg, out)
    loaded = _dataset(cfg)
    ds = loaded.data
    if not args.no_proxy and ds.labels is None:
        raise ContractError("proxy score needs labels; pass labels=<file> or use --no-proxy")
    samples = _samples(bundle, cfg.eval_samples, args.seed)
    nn = evaluation.memorization_check(samples, ds.images)
    score = {"nn_distance": nn.mean, "recon_error": evaluation.reconstruction_error(heldout_images(loaded, cfg), bundle)}
    if not args.no_proxy:
        clf = evaluation.train_classifier(ds, cfg.classifier_epochs, seed=cfg.seed)
        score["proxy_inception"] = evaluation.proxy_inception_score(clf.probabilities(samples))
        score["classifier_accuracy"] = clf.accuracy(ds)
    score.update(nn.as_dict())
    report = dict(score)
    (out / "score_report.txt").write_text(evaluation.format_report(score))
    if loaded.spec is not None:
        modes = evaluation.mode_coverage(samples, mode_centroids(loaded.spec), blob_tau(cfg, loaded.spec))
        (out / "mode_report.txt").write_text(evaluation.format_report(modes.as_dict()))
        plotting.plot_mode_histogram(modes.counts, modes.within, out / "mode_histogram.png")
        report.update(modes.as_dict())
    else:
        log.warning("dataset has no generating spec; mode report skipped")
    (out / "report.tsv").write_text(evaluation.format_table(report))
    plotting.plot_samples(samples[:64], out / "samples.png")
    sys.stdout.write(evaluation.format_report(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_gradcheck

    cfg = load_config(args.config, args.overrides)
    out = _outdir(args)
    _echo_config(cfg, out)
    selection = None if args.select is None else [s for s in args.select.split(",") if s.strip()]
    rows = run_gradcheck(selection, seed=cfg.seed, instances=args.instances)
    table = format_table(rows)
    (out / "gradcheck.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK if all(r.passed for r in rows) else EXIT_CHECK_FAILED


COMMANDS = {
    "train-dict": cmd_train_dict,
    "train": cmd_train,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = load_config(args.config, args.overrides).threads if args.command in ("train-dict", "train", "gradcheck") else 1
        with _thread_limit(threads):
            return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpganError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
