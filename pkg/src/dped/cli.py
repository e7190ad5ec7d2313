"""Command-line entry point: prepare, train, enhance, evaluate, curve, ablate.

Exit codes: 0 success, 2 usage/config error, 3 empty-result error,
4 numeric divergence.

Option precedence is flags > config file > built-in defaults. The config
file (``--config dped.toml``) holds one table per command, e.g.::

    [train]
    iterations = 500
    profile = "mse"
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np
import torch

from . import align, evaluation, imageio, nets
from . import train as train_mod
from .errors import DpedError, EmptyDataset, NonFiniteGradient, NonFiniteLoss, SchemaError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EMPTY = 3
EXIT_DIVERGED = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise CliError(f"cannot read config {path}: {e}")


def _merged(args: argparse.Namespace, config: dict, command: str, key: str, default):
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    section = config.get(command, {})
    if key in section:
        return section[key]
    if key.replace("-", "_") in section:
        return section[key.replace("-", "_")]
    return default


def _apply_threads(args) -> None:
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)
    elif getattr(args, "threads", None):
        torch.set_num_threads(args.threads)


def _find_phone_dir(raw_dir: Path, phone_name: str | None) -> Path:
    if phone_name is not None:
        d = raw_dir / phone_name
        if not d.is_dir():
            raise CliError(f"phone directory {d} does not exist")
        return d
    candidates = [d for d in raw_dir.iterdir() if d.is_dir() and d.name != "dslr"]
    if len(candidates) != 1:
        raise CliError(
            f"expected layout <root>/<phone-name>/NNN.png plus <root>/dslr/NNN.png; "
            f"found {len(candidates)} non-dslr directories in {raw_dir}"
        )
    return candidates[0]


def cmd_prepare(args, config) -> int:
    raw_dir = Path(args.raw_dir)
    out_dir = Path(args.out_dir)
    if not raw_dir.is_dir() or not (raw_dir / "dslr").is_dir():
        raise CliError(
            f"expected layout <root>/<phone-name>/NNN.png plus <root>/dslr/NNN.png under {raw_dir}"
        )
    phone_dir = _find_phone_dir(raw_dir, _merged(args, config, "prepare", "phone-name", None))
    cfg = align.AlignConfig(
        cc_threshold=float(_merged(args, config, "prepare", "cc-threshold", 0.9)),
        patch_size=int(_merged(args, config, "prepare", "patch-size", 100)),
        max_shift=int(_merged(args, config, "prepare", "max-shift", 5)),
        ransac_iters=int(_merged(args, config, "prepare", "ransac-iters", 2000)),
        ransac_inlier_px=float(_merged(args, config, "prepare", "ransac-inlier-px", 3.0)),
        ratio_test=float(_merged(args, config, "prepare", "ratio-test", 0.8)),
        rotation_range=float(_merged(args, config, "prepare", "rotation-range", 1.5)),
        rotation_step=float(_merged(args, config, "prepare", "rotation-step", 0.5)),
    )
    seed = int(_merged(args, config, "prepare", "seed", 0))
    stems = sorted(
        p.stem for p in phone_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not stems:
        raise CliError(f"no images found in {phone_dir}")
    pairs: list[align.PatchPair] = []
    processed = 0
    for stem in stems:
        dslr_path = next(
            (p for p in ((raw_dir / "dslr" / (stem + ext)) for ext in (".png", ".jpg", ".jpeg")) if p.exists()),
            None,
        )
        if dslr_path is None:
            continue
        phone_path = next(p for p in phone_dir.iterdir() if p.stem == stem)
        phone = imageio.load_image(phone_path)
        dslr = imageio.load_image(dslr_path)
        try:
            pairs.extend(align.align_pair(phone, dslr, cfg, seed=seed, image_id=stem))
        except DpedError as e:
            print(f"warning: skipping image pair {stem!r}: {e}", file=sys.stderr)
            continue
        processed += 1
    summary = align.write_patch_pack(pairs, out_dir, seed=seed)
    summary["n_images_processed"] = processed
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    print(f"processed {processed} image pairs, emitted {len(pairs)} patch pairs -> {out_dir}")
    if not pairs:
        raise CliError("no patch pairs passed the cross-correlation threshold", EXIT_EMPTY)
    return EXIT_OK


def _build_train_config(args, config, command: str) -> train_mod.TrainConfig:
    weights = train_mod.LossWeights(
        w_content=float(_merged(args, config, command, "w-content", 1.0)),
        w_texture=float(_merged(args, config, command, "w-texture", 0.4)),
        w_color=float(_merged(args, config, command, "w-color", 0.1)),
        w_tv=float(_merged(args, config, command, "w-tv", 400.0)),
    )
    return train_mod.TrainConfig(
        batch_size=int(_merged(args, config, command, "batch-size", 50)),
        iterations=int(_merged(args, config, command, "iterations", 20000)),
        lr=float(_merged(args, config, command, "lr", 5e-4)),
        pretrain_iters=int(_merged(args, config, command, "pretrain-iters", 2000)),
        loss_weights=weights,
        content_layer=str(_merged(args, config, command, "content-layer", "relu5_4")),
        seed=int(_merged(args, config, command, "seed", 0)),
        checkpoint_every=int(_merged(args, config, command, "checkpoint-every", 1000)),
        loss_profile=str(_merged(args, config, command, "profile", "full")),
        generator_channels=int(_merged(args, config, command, "generator-channels", 64)),
    )


def _load_vgg_if_needed(cfg: train_mod.TrainConfig, vgg_path) -> nets.Vgg19Features | None:
    needs = "content" in train_mod._ACTIVE[cfg.loss_profile]
    if not needs:
        return None
    if vgg_path is None:
        raise CliError(f"loss profile {cfg.loss_profile!r} requires --vgg-weights")
    return nets.vgg_load(vgg_path)


def cmd_train(args, config) -> int:
    cfg = _build_train_config(args, config, "train")
    try:
        cfg.validate()
    except ValueError as e:
        raise CliError(str(e))
    pack = align.PatchPack(args.pack_dir)
    data = train_mod.load_split_pairs(pack, "train")
    if not data:
        raise CliError("patch pack has no training pairs", EXIT_EMPTY)
    vgg = _load_vgg_if_needed(cfg, _merged(args, config, "train", "vgg-weights", None))
    result = train_mod.train(
        data,
        cfg,
        args.out_dir,
        vgg=vgg,
        resume=getattr(args, "resume", None),
        deterministic=bool(getattr(args, "deterministic", False)),
    )
    print(f"finished at iteration {result.state.iteration}; checkpoint: {result.checkpoint_dir}")
    return EXIT_OK


def _load_generator(checkpoint: str) -> nets.Generator:
    path = Path(checkpoint)
    if path.is_dir():
        path = path / "generator.dpedw"
    gen = nets.weights_load(path, "generator")
    return gen


def cmd_enhance(args, config) -> int:
    gen = _load_generator(args.checkpoint)
    img = imageio.load_image(args.image_in)
    out = evaluation.enhance_image(gen, img)
    imageio.save_image(out.astype(np.float32), args.image_out)
    print(f"enhanced {args.image_in} -> {args.image_out}")
    return EXIT_OK


def _test_pairs(pack: align.PatchPack, split: str):
    ids = pack.pair_ids(split)
    return [(pid, *pack.load_pair(pid)) for pid in ids]


def cmd_evaluate(args, config) -> int:
    gen = _load_generator(args.checkpoint)
    pack = align.PatchPack(args.pack_dir)
    split = _merged(args, config, "evaluate", "split", "test")
    pairs = _test_pairs(pack, split)
    if not pairs:
        raise CliError(f"patch pack has no pairs in split {split!r}", EXIT_EMPTY)
    report = evaluation.evaluate_dataset(gen, pairs)
    out_csv = Path(args.out_csv)
    evaluation.write_report(report, out_csv, out_csv.with_suffix(".json"))
    print(f"mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f} over {report.count} pairs")
    return EXIT_OK


def cmd_curve(args, config) -> int:
    corpus_dir = Path(args.corpus_dir)
    paths = sorted(
        p for p in corpus_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    ) if corpus_dir.is_dir() else []
    if not paths:
        raise CliError(f"no images in corpus directory {corpus_dir}", EXIT_EMPTY)
    images = [imageio.load_image(p) for p in paths]
    n_max = int(_merged(args, config, "curve", "max-shift", 10))
    seed = int(_merged(args, config, "curve", "seed", 0))
    curve = evaluation.shift_sensitivity_curve(images, n_max=n_max, seed=seed)
    evaluation.write_curve(curve, args.out_csv)
    if getattr(args, "plot", None):
        _plot_curve(curve, args.plot)
    print(f"wrote shift curve over {len(images)} images -> {args.out_csv}")
    return EXIT_OK


def _plot_curve(curve: evaluation.ShiftCurve, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curve.shifts, curve.mse_values, marker="o", label="MSE")
    ax.plot(curve.shifts, curve.color_values, marker="s", label="color loss")
    ax.set_xlabel("shift magnitude (px)")
    ax.set_ylabel("mean per-pixel squared error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_ablate(args, config) -> int:
    cfg = _build_train_config(args, config, "ablate")
    pack = align.PatchPack(args.pack_dir)
    train_pairs = train_mod.load_split_pairs(pack, "train")
    test_pairs = _test_pairs(pack, "test")
    if not test_pairs:
        raise CliError("patch pack has no test split", EXIT_EMPTY)
    vgg_path = _merged(args, config, "ablate", "vgg-weights", None)
    # the first two profiles need VGG features
    vgg = nets.vgg_load(vgg_path) if vgg_path else None
    if vgg is None:
        raise CliError("ablation trains content-bearing profiles and requires --vgg-weights")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    md_path = out_dir / "ablation.md"
    with open(csv_path, "w") as f:
        f.write("profile,mean_psnr,mean_ssim,count,test_split_hash\n")
    with open(md_path, "w") as f:
        f.write("| profile | mean PSNR (dB) | mean SSIM | pairs | test split |\n")
        f.write("|---|---|---|---|---|\n")

    def on_row(row):
        with open(csv_path, "a") as f:
            f.write(
                f"{row['profile']},{row['mean_psnr']:.4f},{row['mean_ssim']:.6f},{row['count']},{row['test_split_hash']}\n"
            )
        with open(md_path, "a") as f:
            f.write(
                f"| {row['profile']} | {row['mean_psnr']:.2f} | {row['mean_ssim']:.4f} | {row['count']} | {row['test_split_hash']} |\n"
            )

    evaluation.ablation_run(train_pairs, test_pairs, cfg, out_dir, vgg=vgg, on_row=on_row)
    print(f"wrote ablation table -> {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dped", description="Phone-to-DSLR photo enhancement pipeline"
    )
    parser.add_argument("--config", help="TOML config file (flags take precedence)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
        p.add_argument("--threads", type=int, help="torch thread count")
        p.add_argument("--deterministic", action="store_true", help="force serial, bitwise-reproducible execution")

    p = sub.add_parser("prepare", help="align photo pairs into a patch pack")
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    p.add_argument("--phone-name", help="phone subdirectory name (default: the only non-dslr dir)")
    p.add_argument("--cc-threshold", type=float, help="patch admission threshold (default 0.9)")
    p.add_argument("--patch-size", type=int, help="patch side in px (default 100)")
    p.add_argument("--max-shift", type=int, help="max window shift in px (default 5)")
    p.add_argument("--ransac-iters", type=int, help="RANSAC iterations (default 2000)")
    p.add_argument("--ransac-inlier-px", type=float, help="RANSAC inlier threshold (default 3.0)")
    p.add_argument("--ratio-test", type=float, help="Lowe ratio (default 0.8)")
    p.add_argument("--rotation-range", type=float, help="window rotation range in deg (default 1.5)")
    p.add_argument("--rotation-step", type=float, help="rotation grid step in deg (default 0.5)")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the enhancement generator")
    p.add_argument("pack_dir")
    p.add_argument("out_dir")
    p.add_argument("--profile", choices=train_mod.PROFILES, help="loss profile (default full)")
    p.add_argument("--iterations", type=int, help="training iterations (default 20000)")
    p.add_argument("--batch-size", type=int, help="batch size (default 50)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 5e-4)")
    p.add_argument("--pretrain-iters", type=int, help="discriminator pretraining iterations (default 2000)")
    p.add_argument("--vgg-weights", help="VGG-19 weights container (needed by content profiles)")
    p.add_argument("--content-layer", help="VGG feature stage (default relu5_4)")
    p.add_argument("--checkpoint-every", type=int, help="checkpoint interval (default 1000)")
    p.add_argument("--generator-channels", type=int, help="generator width (default 64)")
    p.add_argument("--w-content", type=float, help="content/mse weight (default 1.0)")
    p.add_argument("--w-texture", type=float, help="texture weight (default 0.4)")
    p.add_argument("--w-color", type=float, help="color weight (default 0.1)")
    p.add_argument("--w-tv", type=float, help="total-variation weight (default 400.0)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a full-resolution image")
    p.add_argument("checkpoint", help="checkpoint directory or generator container")
    p.add_argument("image_in")
    p.add_argument("image_out")
    common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report over a pack split")
    p.add_argument("checkpoint")
    p.add_argument("pack_dir")
    p.add_argument("out_csv")
    p.add_argument("--split", choices=["train", "val", "test", "all"], help="pack split (default test)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curve", help="MSE vs color-loss shift-sensitivity curve")
    p.add_argument("corpus_dir")
    p.add_argument("out_csv")
    p.add_argument("--max-shift", type=int, help="largest shift in px (default 10)")
    p.add_argument("--plot", help="also write a PNG plot to this path")
    common(p)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("ablate", help="train and score the four loss profiles")
    p.add_argument("pack_dir")
    p.add_argument("out_dir")
    p.add_argument("--iterations", type=int, help="iterations per profile (default 20000)")
    p.add_argument("--batch-size", type=int, help="batch size (default 50)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 5e-4)")
    p.add_argument("--pretrain-iters", type=int, help="discriminator pretraining iterations (default 2000)")
    p.add_argument("--vgg-weights", help="VGG-19 weights container")
    p.add_argument("--content-layer", help="VGG feature stage (default relu5_4)")
    p.add_argument("--generator-channels", type=int, help="generator width (default 64)")
    p.add_argument("--checkpoint-every", type=int, help="checkpoint interval (default 1000)")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        _apply_threads(args)
        return args.func(args, config)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (NonFiniteLoss, NonFiniteGradient) as e:
        print(f"error: numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except EmptyDataset as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except (SchemaError, DpedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
