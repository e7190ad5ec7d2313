"""Image I/O, color conversion, resampling, and Gaussian kernels.

Images are numpy float arrays in channel-major layout: RGB images are
(3, H, W), grayscale images are (H, W), all values in [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import (
    DecodeError,
    InvalidSize,
    InvalidSpec,
    IoError,
    KernelTooLarge,
    ShapeError,
)

# BT.601 luma coefficients
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def validate_rgb(img: np.ndarray) -> None:
    """Raise ShapeError unless `img` is a valid (3, H, W) image in [0, 1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ShapeError("image must be at least 1x1")
    if not np.all(np.isfinite(img)):
        raise ShapeError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ShapeError("image values must lie in [0, 1]")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG/JPEG file into a (3, H, W) float32 image in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise DecodeError(f"unsupported format {im.format!r}: {path}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError as e:
        raise IoError(f"no such file: {path}") from e
    except (OSError, UnidentifiedImageError) as e:
        raise DecodeError(f"cannot decode {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a (3, H, W) [0, 1] image as an 8-bit PNG."""
    validate_rgb(img)
    data = np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)
    try:
        Image.fromarray(data).save(path, format="PNG")
    except (OSError, ValueError) as e:
        raise IoError(f"cannot write {path}: {e}") from e


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B, shape (H, W)."""
    validate_rgb(img)
    gray = np.tensordot(_LUMA, img.astype(np.float64), axes=([0], [0]))
    return np.clip(gray, 0.0, 1.0).astype(img.dtype)


@dataclass(frozen=True)
class GaussianKernelSpec:
    """Truncated 2D Gaussian, G(k,l) = A exp(-(k-mu_x)^2/(2 s_x) - (l-mu_y)^2/(2 s_y)).

    sigma_x / sigma_y are the *denominator scales* (variance-like, px^2),
    not standard deviations. Defaults give a unit-mass kernel.
    """

    amplitude: float = 0.053
    mu_x: float = 0.0
    mu_y: float = 0.0
    sigma_x: float = 3.0
    sigma_y: float = 3.0
    radius: int = 7

    def validate(self) -> None:
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise InvalidSpec("sigma_x and sigma_y must be positive")
        if self.radius < 1:
            raise InvalidSpec("radius must be >= 1")


def gaussian_kernel(spec: GaussianKernelSpec = GaussianKernelSpec()) -> np.ndarray:
    """Evaluate the kernel on integer offsets k, l in [-radius, radius].

    Returns a (2 radius + 1, 2 radius + 1) float64 array indexed [k, l].
    """
    spec.validate()
    k = np.arange(-spec.radius, spec.radius + 1, dtype=np.float64)
    gx = np.exp(-((k - spec.mu_x) ** 2) / (2.0 * spec.sigma_x))
    gy = np.exp(-((k - spec.mu_y) ** 2) / (2.0 * spec.sigma_y))
    return spec.amplitude * np.outer(gx, gy)


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2D correlation with reflect (symmetric) border padding.

    Output has the same shape as the input and is not clamped; a unit-mass
    kernel keeps values in range up to rounding.
    """
    validate_rgb(img)
    if kernel.shape[0] > min(img.shape[1], img.shape[2]):
        raise KernelTooLarge(
            f"kernel side {kernel.shape[0]} exceeds image {img.shape[1:]}"
        )
    out = np.empty_like(img, dtype=np.float64)
    for c in range(3):
        ndimage.correlate(img[c].astype(np.float64), kernel, output=out[c], mode="reflect")
    return out.astype(img.dtype)


def downscale(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bicubic downscale to (new_h, new_w); output clamped to [0, 1]."""
    validate_rgb(img)
    _, h, w = img.shape
    if not (1 <= new_h <= h and 1 <= new_w <= w):
        raise InvalidSize(f"target {new_h}x{new_w} invalid for source {h}x{w}")
    if (new_h, new_w) == (h, w):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img)).unsqueeze(0)
    out = F.interpolate(
        t, size=(new_h, new_w), mode="bicubic", align_corners=False, antialias=True
    )
    return out.squeeze(0).clamp_(0.0, 1.0).numpy()
