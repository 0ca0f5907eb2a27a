"""Command line entry point: ``cubemix {train,infer,eval,ablate,spectrum}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, resample
from .errors import ConfigError, DimensionError, NumericError, ValidationError
from .io import (
    CheckpointError,
    ImageIOError,
    RunConfig,
    config_help,
    image_read,
    image_write,
    load_checkpoint,
    load_config,
    save_checkpoint,
)
from .mixer import wfp_trace
from .spectral import SpectralPlanes, fft2, phase_spectrum, render_spectrum
from .training.data import Dataset, Pair, builtin_images, make_dataset
from .training.loop import evaluate, limited_threads, predict, train_loop

logger = logging.getLogger("cubemix")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
IMAGE_SUFFIXES = (".ppm", ".png")


class UsageError(Exception):
    pass


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"cubemix: error: {msg}", file=sys.stderr)
    return code


def _load_run_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _source_images(cfg: RunConfig) -> list[np.ndarray]:
    if cfg.data_dir is None:
        return builtin_images()
    files = sorted(p for p in Path(cfg.data_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no .ppm/.png images in {cfg.data_dir}")
    return [image_read(p) for p in files]


def _check_paths(cfg: RunConfig) -> Path:
    if cfg.data_dir is not None and not Path(cfg.data_dir).is_dir():
        raise ConfigError(f"data_dir not found: {cfg.data_dir}")
    out = Path(cfg.out_dir)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"out_dir is not a directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig) -> Dataset:
    return make_dataset(
        _source_images(cfg),
        patch_size=cfg.patch_size,
        seed=cfg.train.seed,
        n_train=cfg.n_train,
        n_val=cfg.n_val,
    )


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _check_paths(cfg)
    data = _dataset(cfg)
    logger.info("dataset sha256 %s", data.digest())
    result = train_loop(cfg.train, data, net_cfg=cfg.net)
    (out / "metrics.csv").write_text(result.metrics_csv())
    if cfg.save_checkpoint:
        save_checkpoint(out / "checkpoint.ckpt", result.params, result.net_cfg)
    if result.log:
        last = result.log[-1]
        print(f"PSNR={last['psnr_val']!r} SSIM={last['ssim_val']!r}")
    return EXIT_OK


def _check_input_size(img: np.ndarray, net) -> None:
    if net.path_sizes is None and img.shape[:2] != (net.image_width, net.image_height):
        raise DimensionError(
            f"image is {img.shape[0]}x{img.shape[1]} but the checkpoint was built for "
            f"{net.image_width}x{net.image_height} (set path_sizes for resolution-independent models)"
        )


def cmd_infer(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    output = args.out or args.output
    if not output:
        raise UsageError("an output path is required (--out)")
    params, net = load_checkpoint(args.checkpoint)
    img = image_read(args.input)
    _check_input_size(img, net)
    image_write(output, predict(params, net, img))
    return EXIT_OK


def _eval_pairs(root: Path) -> list[Pair]:
    blurry_dir, sharp_dir = root / "blurry", root / "sharp"
    if not blurry_dir.is_dir() or not sharp_dir.is_dir():
        raise ConfigError(f"{root} must contain blurry/ and sharp/ subdirectories")
    pairs = []
    for b in sorted(p for p in blurry_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        s = sharp_dir / b.name
        if not s.is_file():
            raise ConfigError(f"no sharp counterpart for {b.name}")
        blurry, sharp = image_read(b), image_read(s)
        if blurry.shape != sharp.shape:
            raise DimensionError(f"{b.name}: blurry {blurry.shape} vs sharp {sharp.shape}")
        pairs.append(Pair(blurry, sharp, None, 0, (0, 0), b.stem))
    if not pairs:
        raise ConfigError(f"empty dataset: {root}")
    return pairs


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    root = Path(args.dataset_dir)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}")
    params, net = load_checkpoint(args.checkpoint)
    pairs = _eval_pairs(root)
    for p in pairs:
        _check_input_size(p.blurry, net)
    result = evaluate(params, pairs, net)
    out = Path(args.out) if args.out else Path("eval.csv")
    out.write_text(result.to_csv())
    print(f"PSNR={result.psnr!r} SSIM={result.ssim!r}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _check_paths(cfg)
    data = _dataset(cfg)
    digest = data.digest()
    variants = ["full"] + [v for v in cfg.variants if v != "full"]
    rows, failures = [], []
    for v in variants:
        print(f"variant={v} dataset={digest}", flush=True)
        try:
            train_cfg = type(cfg.train)(**{**cfg.train.__dict__, "ablation": v})
            result = train_loop(train_cfg, data, net_cfg=cfg.net)
            ev = evaluate(result.params, data.val, result.net_cfg)
            rows.append((v, ev.psnr, ev.ssim))
        except NumericError as e:
            logger.error("variant %s failed: %s", v, e)
            failures.append((v, EXIT_NUMERIC))
            rows.append((v, math.nan, math.nan))
        except Exception as e:  # keep going with the remaining variants
            logger.error("variant %s failed: %s", v, e)
            failures.append((v, EXIT_USAGE))
            rows.append((v, math.nan, math.nan))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "psnr", "ssim"))
        for v, p, s in rows:
            w.writerow((v, repr(p), repr(s)))
    for v, p, s in rows:
        print(f"{v:<8} PSNR={p:.4f} SSIM={s:.4f}")
    if failures:
        return max(code for _, code in failures)
    return EXIT_OK


def _to_unit(t: Tensor, hi: float = 10.0) -> np.ndarray:
    return np.asarray(t.data, dtype=np.float64) / hi


def cmd_spectrum(args) -> int:
    if not args.out:
        raise UsageError("an output prefix is required (--out)")
    img = image_read(args.input)
    prefix = str(args.out)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    x = Tensor(img)
    s = fft2(x)
    zeros = Tensor(np.zeros(img.shape))
    renders = {
        "real": render_spectrum(SpectralPlanes(s.real, zeros)),
        "imag": render_spectrum(SpectralPlanes(zeros, s.imag)),
        "magnitude": render_spectrum(s),
    }
    for name, r in renders.items():
        image_write(f"{prefix}_{name}.ppm", _to_unit(r))
    phase = np.fft.fftshift(phase_spectrum(s).data, axes=(0, 1))
    image_write(f"{prefix}_phase.ppm", (phase + np.pi) / (2 * np.pi))

    if args.checkpoint:
        params, net = load_checkpoint(args.checkpoint)
        w, h = net.processing_sizes()[0]
        low = resample(Tensor(img.astype(np.float32)), w, h, "bicubic")
        phi1, phi2 = params.paths[0]
        for k, planes in enumerate(wfp_trace(low, phi1, phi2, net.spectral_input)):
            image_write(f"{prefix}_block{k}.ppm", _to_unit(render_spectrum(planes)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--out", help="output path (directory, file or prefix per command)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="cubemix",
        description="Multi-scale cubic-mixer deblurring.",
        epilog="configuration keys:\n" + config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train and write checkpoint + metrics.csv")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("infer", parents=[common], help="deblur one image")
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    p.set_defaults(func=cmd_infer)
    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM over a blurry/ + sharp/ directory")
    p.add_argument("dataset_dir")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("ablate", parents=[common], help="train and compare ablation variants")
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("spectrum", parents=[common], help="render Fourier planes of an image")
    p.add_argument("input")
    p.set_defaults(func=cmd_spectrum)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with limited_threads():
            return args.func(args)
    except NumericError as e:
        return _fail(str(e), EXIT_NUMERIC)
    except (UsageError, ConfigError, ValidationError, DimensionError, ImageIOError, CheckpointError) as e:
        return _fail(str(e))


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
