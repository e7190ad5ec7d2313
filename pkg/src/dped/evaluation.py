"""Quantitative evaluation: PSNR/SSIM reports, the MSE-vs-color-loss
shift-sensitivity curve, and the four-way loss-ablation harness."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import imageio, losses, nets
from . import train as train_mod
from .errors import EmptyDataset, ImageTooSmall, ShapeError
from .imageio import GaussianKernelSpec

PSNR_CAP_DB = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricsReport:
    rows: list[dict]  # {id, psnr_db, ssim}
    mean_psnr: float
    mean_ssim: float
    count: int


@dataclass
class ShiftCurve:
    shifts: list[int]
    mse_values: list[float]
    color_values: list[float]


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """10 log10(1 / MSE) over all values; identical images report the cap."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Single-scale SSIM on grayscale images: 11x11 Gaussian window
    (sigma 1.5), K1=0.01, K2=0.03, L=1, averaged over all window positions."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = imageio.to_grayscale(x), imageio.to_grayscale(y)
    if min(x.shape) < 11:
        raise ImageTooSmall("ssim requires images at least 11x11")
    x = x.astype(np.float64)
    y = y.astype(np.float64)

    def filt(a):
        return ndimage.gaussian_filter(a, SSIM_SIGMA, radius=SSIM_RADIUS, mode="reflect")

    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def enhance_image(gen: nets.Generator, img: np.ndarray) -> np.ndarray:
    """Infer-mode full-image enhancement; output has the input's shape."""
    batch = torch.from_numpy(np.ascontiguousarray(img)).float().unsqueeze(0)
    out = nets.generator_forward(gen, batch, "infer")
    return out.squeeze(0).numpy()


def evaluate_dataset(
    gen: nets.Generator, test_pairs: list[tuple[str, np.ndarray, np.ndarray]]
) -> MetricsReport:
    """Enhance each source patch and score it against its DSLR target."""
    if not test_pairs:
        raise EmptyDataset("no test pairs to evaluate")
    rows = []
    for pair_id, src, dst in test_pairs:
        enhanced = enhance_image(gen, src)
        rows.append({"id": pair_id, "psnr_db": psnr(enhanced, dst), "ssim": ssim(enhanced, dst)})
    return MetricsReport(
        rows=rows,
        mean_psnr=float(np.mean([r["psnr_db"] for r in rows])),
        mean_ssim=float(np.mean([r["ssim"] for r in rows])),
        count=len(rows),
    )


def write_report(report: MetricsReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "psnr_db", "ssim"])
        for r in report.rows:
            writer.writerow([r["id"], f"{r['psnr_db']:.6f}", f"{r['ssim']:.6f}"])
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(
                {"mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim, "count": report.count},
                f,
                indent=2,
            )


def _random_offset(n: int, rng: np.random.Generator) -> tuple[int, int]:
    theta = rng.uniform(0.0, 2 * np.pi)
    return int(round(n * np.sin(theta))), int(round(n * np.cos(theta)))


def shift_sensitivity_curve(
    images: list[np.ndarray],
    n_max: int = 10,
    spec: GaussianKernelSpec = GaussianKernelSpec(),
    seed: int = 0,
) -> ShiftCurve:
    """Mean per-pixel MSE and blurred (color) squared error between each image
    and a copy shifted by n pixels in a seeded random direction, n = 0..n_max.

    Shifted images use reflected edge fill. Both series use per-pixel means so
    their ratio matches the sum-based loss conventions.
    """
    if not images:
        raise EmptyDataset("shift curve requires a nonempty corpus")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    rng = np.random.default_rng(seed)
    mse_values, color_values = [], []
    blurred = [losses.batch_blur(torch.from_numpy(img).double().unsqueeze(0), spec).squeeze(0).numpy() for img in images]
    for n in range(n_max + 1):
        mses, colors = [], []
        for img, img_b in zip(images, blurred):
            if n == 0:
                mses.append(0.0)
                colors.append(0.0)
                continue
            dy, dx = _random_offset(n, rng)
            shifted = np.stack(
                [ndimage.shift(img[c].astype(np.float64), (dy, dx), order=0, mode="reflect") for c in range(3)]
            )
            shifted_b = losses.batch_blur(torch.from_numpy(shifted).unsqueeze(0), spec).squeeze(0).numpy()
            mses.append(float(np.mean((img.astype(np.float64) - shifted) ** 2)))
            colors.append(float(np.mean((img_b - shifted_b) ** 2)))
        mse_values.append(float(np.mean(mses)))
        color_values.append(float(np.mean(colors)))
    return ShiftCurve(shifts=list(range(n_max + 1)), mse_values=mse_values, color_values=color_values)


def write_curve(curve: ShiftCurve, csv_path) -> None:
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["shift", "mse", "color_loss"])
        for n, m, c in zip(curve.shifts, curve.mse_values, curve.color_values):
            writer.writerow([n, f"{m:.10f}", f"{c:.10f}"])


def split_hash(pair_ids: list[str]) -> str:
    return hashlib.sha256(",".join(sorted(pair_ids)).encode()).hexdigest()[:16]


def ablation_run(
    train_pairs: list[tuple[np.ndarray, np.ndarray]],
    test_pairs: list[tuple[str, np.ndarray, np.ndarray]],
    base_cfg: train_mod.TrainConfig,
    out_dir,
    vgg: nets.Vgg19Features | None = None,
    profiles: tuple[str, ...] = train_mod.PROFILES,
    on_row=None,
) -> list[dict]:
    """Train one model per loss profile with identical seed/data and evaluate
    all of them on the same test pairs.

    Rows are produced incrementally (and handed to `on_row` as each profile
    finishes) so an aborted run keeps its completed rows."""
    if not test_pairs:
        raise EmptyDataset("ablation requires a test split")
    test_hash = split_hash([t[0] for t in test_pairs])
    rows = []
    for profile in profiles:
        cfg = replace(base_cfg, loss_profile=profile)
        result = train_mod.train(train_pairs, cfg, Path(out_dir) / profile, vgg=vgg)
        report = evaluate_dataset(result.state.gen, test_pairs)
        row = {
            "profile": profile,
            "mean_psnr": report.mean_psnr,
            "mean_ssim": report.mean_ssim,
            "count": report.count,
            "test_split_hash": test_hash,
        }
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
