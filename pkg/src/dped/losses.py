"""Composite perceptual training objective: color, texture, content, and
total-variation terms plus the weighted total and the discriminator's own
cross-entropy loss. Everything here is differentiable through torch.

Reduction convention: every loss is a mean over the batch, so magnitudes
are batch-size independent. The color loss sums squared differences over
each image (no per-pixel normalization) before the batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonFiniteComponent, ShapeError
from .imageio import GaussianKernelSpec, gaussian_kernel
from .nets import Discriminator, Vgg19Features, discriminator_forward

PROB_EPS = 1e-8

_LUMA_RGB = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the weighted total objective."""

    w_content: float = 1.0
    w_texture: float = 0.4
    w_color: float = 0.1
    w_tv: float = 400.0


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    content: float
    texture: float
    color: float
    tv: float


def batch_grayscale(batch: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of an (N, 3, H, W) batch, differentiable, shape (N, 1, H, W)."""
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) batch, got {tuple(batch.shape)}")
    w = torch.tensor(_LUMA_RGB, dtype=batch.dtype, device=batch.device).view(1, 3, 1, 1)
    return (batch * w).sum(dim=1, keepdim=True)


def _kernel_tensor(spec: GaussianKernelSpec, dtype: torch.dtype) -> torch.Tensor:
    k = torch.from_numpy(np.ascontiguousarray(gaussian_kernel(spec))).to(dtype)
    return k.expand(3, 1, *k.shape).clone()


def batch_blur(batch: torch.Tensor, spec: GaussianKernelSpec = GaussianKernelSpec()) -> torch.Tensor:
    """Per-channel Gaussian correlation with reflect padding, same output size."""
    if batch.ndim != 4:
        raise ShapeError(f"expected 4D batch, got {tuple(batch.shape)}")
    kernel = _kernel_tensor(spec, batch.dtype)[: batch.shape[1]]
    p = spec.radius
    x = torch.nn.functional.pad(batch, (p, p, p, p), mode="reflect")
    return torch.nn.functional.conv2d(x, kernel, groups=batch.shape[1])


def color_loss(
    x: torch.Tensor, y: torch.Tensor, spec: GaussianKernelSpec = GaussianKernelSpec()
) -> torch.Tensor:
    """Squared L2 distance between Gaussian-blurred images, batch mean."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    diff = batch_blur(x, spec) - batch_blur(y, spec)
    return diff.pow(2).flatten(1).sum(dim=1).mean()


def texture_loss(disc: Discriminator, enhanced_gray: torch.Tensor, mode: str = "train") -> torch.Tensor:
    """Generator-side adversarial objective: -mean log D(enhanced)."""
    probs = discriminator_forward(disc, enhanced_gray, mode)
    probs = torch.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    return -torch.log(probs).mean()


def content_loss(
    vgg: Vgg19Features, enhanced: torch.Tensor, target: torch.Tensor, layer: str = "relu5_4"
) -> torch.Tensor:
    """Feature-space squared distance at a VGG-19 ReLU stage, normalized by
    feature-map volume, batch mean."""
    if enhanced.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(enhanced.shape)} vs {tuple(target.shape)}")
    fe = vgg(enhanced, layer)
    ft = vgg(target, layer)
    volume = fe.shape[1] * fe.shape[2] * fe.shape[3]
    return (fe - ft).pow(2).flatten(1).sum(dim=1).mean() / volume


def tv_loss(batch: torch.Tensor) -> torch.Tensor:
    """Anisotropic squared total variation with forward differences,
    normalized by C*H*W, batch mean."""
    if batch.ndim != 4:
        raise ShapeError(f"expected 4D batch, got {tuple(batch.shape)}")
    n, c, h, w = batch.shape
    if h < 2 or w < 2:
        raise ShapeError("tv_loss requires at least 2x2 images")
    dx = batch[:, :, :, 1:] - batch[:, :, :, :-1]
    dy = batch[:, :, 1:, :] - batch[:, :, :-1, :]
    per_item = dx.pow(2).flatten(1).sum(dim=1) + dy.pow(2).flatten(1).sum(dim=1)
    return per_item.mean() / (c * h * w)


def pixel_mse(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Plain per-pixel mean squared error (appendix ablation profiles)."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).pow(2).mean()


def total_loss(
    content: torch.Tensor | float,
    texture: torch.Tensor | float,
    color: torch.Tensor | float,
    tv: torch.Tensor | float,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the four components.

    Returns the differentiable total (when any component is a tensor) and a
    float breakdown for logging.
    """
    parts = {"content": content, "texture": texture, "color": color, "tv": tv}
    for name, v in parts.items():
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not np.isfinite(val):
            raise NonFiniteComponent(f"{name} loss is not finite: {val}")
    total = (
        weights.w_content * content
        + weights.w_texture * texture
        + weights.w_color * color
        + weights.w_tv * tv
    )
    def _val(v):
        return float(v.detach()) if torch.is_tensor(v) else float(v)

    breakdown = LossBreakdown(
        total=_val(total), content=_val(content), texture=_val(texture), color=_val(color), tv=_val(tv)
    )
    return total, breakdown


def discriminator_loss(
    disc: Discriminator, fake_gray: torch.Tensor, real_gray: torch.Tensor, mode: str = "train"
) -> torch.Tensor:
    """Binary cross-entropy with labels real=1, fake=0, mean over all terms."""
    if fake_gray.shape[0] != real_gray.shape[0]:
        raise ShapeError("fake and real batches must have equal size")
    batch = torch.cat([real_gray, fake_gray], dim=0)
    probs = discriminator_forward(disc, batch, mode)
    probs = torch.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    n = real_gray.shape[0]
    return -(torch.log(probs[:n]).sum() + torch.log(1.0 - probs[n:]).sum()) / (2 * n)
