"""Command-line interface.

Subcommands: synth, train-match, train-refine, denoise, eval, ablate,
dump-scores.  Options can come from a ``key = value`` config file
(--config), overridden by flags.  Exit codes: 0 success, 2 usage error,
3 config error, 4 missing or unreadable file/checkpoint, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from .. import imgio
from ..aggregate import denoise_stage1
from ..matcher import Matcher
from ..nncore import CheckpointError
from ..refine import Refiner
from .config import (ConfigError, DenoiseConfig, SigmaMode, TrainSchedule,
                     apply_options, load_config_file)
from .corpus import Corpus, synth_corpus
from .metrics import evaluate, psnr
from .train import (TrainLog, ablate_window, make_refine_dataset, train_matcher,
                    train_refine, noisy_eval_set)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4


class MissingFileError(Exception):
    pass


def _require_file(path, what: str) -> str:
    if not os.path.exists(path):
        raise MissingFileError(f"{what} not found: {path}")
    return path


def _file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _load_images_dir(path) -> list[np.ndarray]:
    _require_file(path, "image directory")
    names = sorted(n for n in os.listdir(path) if n.lower().endswith((".png", ".ppm", ".pnm")))
    if not names:
        raise MissingFileError(f"no images in directory: {path}")
    return [imgio.read_image(os.path.join(path, n)) for n in names]


def _load_corpus_dir(path) -> Corpus:
    train_dir = os.path.join(path, "train")
    val_dir = os.path.join(path, "val")
    _require_file(train_dir, "corpus train directory")
    train = _load_images_dir(train_dir)
    val = _load_images_dir(val_dir) if os.path.isdir(val_dir) else []
    return Corpus(train=train, val=val)


def _build_settings(args) -> tuple[DenoiseConfig, TrainSchedule]:
    config = DenoiseConfig()
    schedule = TrainSchedule()
    options: dict[str, str] = {}
    if getattr(args, "config", None):
        _require_file(args.config, "config file")
        options.update(load_config_file(args.config))
    for key in ("window_radius", "stage", "seed", "sigma", "pretrain_steps",
                "finetune_steps", "refine_steps", "train_radius",
                "matcher_base_channels", "matcher_fc_width", "refine_hidden"):
        value = getattr(args, key, None)
        if value is not None:
            options[key] = str(value)
    if getattr(args, "blind", False):
        options["sigma_mode"] = "blind"
    return apply_options(config, schedule, options)


def _progress_printer(verbose: bool):
    if not verbose:
        return None
    state = {"t0": time.time()}

    def progress(phase, step, total, value):
        if step % max(1, total // 20) == 0 or step == total - 1:
            dt = time.time() - state["t0"]
            print(f"[{phase}] step {step + 1}/{total} value {value:.5g} ({dt:.0f}s)",
                  file=sys.stderr)

    return progress


def _cmd_synth(args) -> int:
    corpus = synth_corpus(args.count, size=args.size, kind=args.kind,
                          seed=args.seed, val_count=args.val_count)
    for split, images in (("train", corpus.train), ("val", corpus.val)):
        out_dir = os.path.join(args.out, split)
        os.makedirs(out_dir, exist_ok=True)
        for i, img in enumerate(images):
            imgio.write_image(img, os.path.join(out_dir, f"{i:03d}.png"))
    print(f"wrote {len(corpus.train)} train + {len(corpus.val)} val images to {args.out}")
    return EXIT_OK


def _cmd_train_match(args) -> int:
    config, schedule = _build_settings(args)
    corpus = _load_corpus_dir(args.corpus)
    log = TrainLog()
    params = train_matcher(corpus.train, config, schedule, log=log,
                           progress=_progress_printer(args.verbose))
    matcher = Matcher(config.matcher_arch)
    matcher.save(params, args.out)
    print(f"wrote matcher checkpoint {args.out}")
    if args.log_prefix:
        from .report import save_train_log

        for path in save_train_log(log, args.log_prefix):
            print(f"wrote {path}")
    return EXIT_OK


def _cmd_train_refine(args) -> int:
    config, schedule = _build_settings(args)
    corpus = _load_corpus_dir(args.corpus)
    matcher = Matcher(config.matcher_arch)
    matcher_params = matcher.load(_require_file(args.match_ckpt, "matcher checkpoint"))
    log = TrainLog()
    progress = _progress_printer(args.verbose)
    triples = make_refine_dataset(corpus.train, matcher_params, config,
                                  limit=args.max_images, progress=progress)
    params = train_refine(triples, config, schedule, log=log, progress=progress)
    refiner = Refiner(config.refine_arch)
    refiner.save(params, args.out, matcher_digest=_file_digest(args.match_ckpt))
    print(f"wrote refiner checkpoint {args.out}")
    if args.log_prefix:
        from .report import save_train_log

        for path in save_train_log(log, args.log_prefix):
            print(f"wrote {path}")
    return EXIT_OK


def _cmd_denoise(args) -> int:
    config, _ = _build_settings(args)
    image = imgio.read_image(_require_file(args.input, "input image"))
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.blind:
        sigma = float(rng.uniform(0.0, 55.0))
        image = image + rng.normal(0.0, sigma, size=image.shape)
        print(f"added blind noise sigma={sigma:.2f}")
    elif args.sigma is not None and args.sigma > 0:
        image = image + rng.normal(0.0, args.sigma, size=image.shape)
        print(f"added noise sigma={args.sigma:.2f}")

    matcher = Matcher(config.matcher_arch)
    matcher_params = matcher.load(_require_file(args.match_ckpt, "matcher checkpoint"))
    out = denoise_stage1(image, matcher_params, config)
    if config.stage == "full":
        if not args.refine_ckpt:
            raise MissingFileError("--stage full requires --refine-ckpt")
        refiner = Refiner(config.refine_arch)
        refine_params, trained_against = refiner.load(
            _require_file(args.refine_ckpt, "refiner checkpoint"))
        if trained_against and trained_against != _file_digest(args.match_ckpt):
            raise CheckpointError(
                f"refiner {args.refine_ckpt} was trained against a different matcher "
                f"checkpoint; retrain it or pass the original matcher")
        out = refiner.forward_batch(image[None], out[None], refine_params)[0]
    imgio.write_image(out, args.out)
    print(f"wrote {args.out}")
    if args.clean:
        clean = imgio.read_image(_require_file(args.clean, "clean image"))
        print(f"PSNR vs clean: {psnr(clean, out):.3f} dB (input was {psnr(clean, image):.3f} dB)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    clean = _load_images_dir(args.clean)
    denoised = _load_images_dir(args.denoised)
    noisy = _load_images_dir(args.noisy) if args.noisy else None
    report = evaluate(clean, noisy, denoised)
    print(report.to_text(), end="")
    if args.out_prefix:
        from .report import save_metrics_report

        for path in save_metrics_report(report, args.out_prefix):
            print(f"wrote {path}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config, _ = _build_settings(args)
    corpus = _load_corpus_dir(args.corpus)
    val = corpus.val or corpus.train
    matcher = Matcher(config.matcher_arch)
    matcher_params = matcher.load(_require_file(args.match_ckpt, "matcher checkpoint"))
    radii = [int(r) for r in args.radii.split(",")]
    sigma = config.sigma_mode.sigma if config.sigma_mode.kind == "fixed" else 25.0
    noisy = noisy_eval_set(val, sigma, config.seed)
    rows = ablate_window(matcher_params, val, noisy, config, radii)
    print(f"{'radius':>7} {'psnr dB':>9} {'ssim':>7} {'seconds':>9}")
    for row in rows:
        print(f"{row['radius']:>7} {row['mean_psnr']:9.3f} {row['mean_ssim']:7.4f} {row['seconds']:9.2f}")
    if args.out_prefix:
        from .report import save_ablation_report

        for path in save_ablation_report(rows, args.out_prefix):
            print(f"wrote {path}")
    return EXIT_OK


def _cmd_dump_scores(args) -> int:
    config, _ = _build_settings(args)
    image = imgio.read_image(_require_file(args.input, "input image"))
    matcher = Matcher(config.matcher_arch)
    matcher_params = matcher.load(_require_file(args.match_ckpt, "matcher checkpoint"))
    try:
        row, col = (int(v) for v in args.ref.split(","))
    except ValueError:
        raise ConfigError(f"--ref wants 'row,col', got {args.ref!r}")
    maps = matcher.score_maps(image, matcher_params, (row, col), config.window_radius)
    from .report import save_score_maps

    for path in save_score_maps(maps, args.out_prefix):
        print(f"wrote {path}")
    return EXIT_OK


def _add_common_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--sigma", type=float, help="fixed noise level in gray levels")
    p.add_argument("--blind", action="store_true", help="blind mode: sigma ~ U[0,55]")
    p.add_argument("--window", dest="window_radius", type=int, help="search window radius")
    p.add_argument("--matcher-base-channels", dest="matcher_base_channels", type=int)
    p.add_argument("--matcher-fc-width", dest="matcher_fc_width", type=int)
    p.add_argument("--refine-hidden", dest="refine_hidden", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfsim",
        description="Self-similarity image denoiser: learned sub-band patch matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic training corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--kind", choices=["tiled-texture", "repeated-stripe", "mixed"], default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-count", type=int, default=8)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-match", help="pre-train then fine-tune the matcher")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int)
    p.add_argument("--train-radius", dest="train_radius", type=int)
    p.add_argument("--log-prefix")
    p.add_argument("--verbose", action="store_true")
    _add_common_model_flags(p)
    p.set_defaults(func=_cmd_train_match)

    p = sub.add_parser("train-refine", help="train the refiner against a frozen matcher")
    p.add_argument("--corpus", required=True)
    p.add_argument("--match-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refine-steps", dest="refine_steps", type=int)
    p.add_argument("--max-images", type=int, help="cap refine dataset size")
    p.add_argument("--log-prefix")
    p.add_argument("--verbose", action="store_true")
    _add_common_model_flags(p)
    p.set_defaults(func=_cmd_train_refine)

    p = sub.add_parser("denoise", help="denoise one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--match-ckpt", required=True)
    p.add_argument("--refine-ckpt")
    p.add_argument("--stage", choices=["match", "full"])
    p.add_argument("--clean", help="clean reference for a PSNR report line")
    _add_common_model_flags(p)
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("eval", help="metrics for aligned clean/denoised directories")
    p.add_argument("--clean", required=True)
    p.add_argument("--denoised", required=True)
    p.add_argument("--noisy")
    p.add_argument("--out-prefix")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="stage-1 PSNR and runtime per window radius")
    p.add_argument("--corpus", required=True)
    p.add_argument("--match-ckpt", required=True)
    p.add_argument("--radii", default="7,11")
    p.add_argument("--out-prefix")
    _add_common_model_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("dump-scores", help="score-map images for one reference patch")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--match-ckpt", required=True)
    p.add_argument("--ref", required=True, help="reference patch top-left as 'row,col'")
    p.add_argument("--out-prefix", required=True)
    _add_common_model_flags(p)
    p.set_defaults(func=_cmd_dump_scores)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"selfsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingFileError, FileNotFoundError) as exc:
        print(f"selfsim: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (imgio.ImageIOError, CheckpointError) as exc:
        print(f"selfsim: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"selfsim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
