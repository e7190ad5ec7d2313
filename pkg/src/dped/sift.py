"""Scale-space keypoint detector and 128-dim gradient-histogram descriptor.

A compact DoG/SIFT-style implementation: Gaussian pyramid, 26-neighbor
extrema with contrast and edge rejection, quadratic sub-pixel refinement,
orientation assignment from a 36-bin histogram, and the usual 4x4x8
descriptor with clip-and-renormalize. The alignment pipeline takes any
detector with this signature, so alternatives can be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmall

N_SCALES = 3
SIGMA0 = 1.6
CONTRAST_THRESH = 0.02
EDGE_RATIO = 10.0
N_ORI_BINS = 36
DESC_WIDTH = 4
DESC_ORI_BINS = 8


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    descriptor: np.ndarray = field(repr=False)


def _gaussian_pyramid(gray: np.ndarray):
    n_octaves = max(1, int(np.log2(min(gray.shape) / 32.0)) + 1)
    k = 2.0 ** (1.0 / N_SCALES)
    sigmas = [SIGMA0 * k**i for i in range(N_SCALES + 3)]
    octaves = []
    base = ndimage.gaussian_filter(gray.astype(np.float64), SIGMA0, mode="reflect")
    for _ in range(n_octaves):
        imgs = [base]
        for i in range(1, N_SCALES + 3):
            inc = np.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)
            imgs.append(ndimage.gaussian_filter(imgs[-1], inc, mode="reflect"))
        octaves.append(imgs)
        base = imgs[N_SCALES][::2, ::2]
    return octaves, sigmas


def _find_extrema(dogs: list[np.ndarray]) -> list[tuple[int, int, int]]:
    stack = np.stack(dogs)  # (S, H, W)
    maxf = ndimage.maximum_filter(stack, size=3, mode="constant", cval=-np.inf)
    minf = ndimage.minimum_filter(stack, size=3, mode="constant", cval=np.inf)
    is_ext = ((stack == maxf) | (stack == minf)) & (np.abs(stack) > CONTRAST_THRESH)
    is_ext[0] = is_ext[-1] = False
    is_ext[:, :8, :] = is_ext[:, -8:, :] = False
    is_ext[:, :, :8] = is_ext[:, :, -8:] = False
    out = []
    for s, r, c in zip(*np.nonzero(is_ext)):
        d = dogs[s]
        dxx = d[r, c + 1] + d[r, c - 1] - 2 * d[r, c]
        dyy = d[r + 1, c] + d[r - 1, c] - 2 * d[r, c]
        dxy = (d[r + 1, c + 1] - d[r + 1, c - 1] - d[r - 1, c + 1] + d[r - 1, c - 1]) / 4.0
        tr, det = dxx + dyy, dxx * dyy - dxy * dxy
        if det <= 0 or tr * tr / det >= (EDGE_RATIO + 1) ** 2 / EDGE_RATIO:
            continue
        out.append((int(s), int(r), int(c)))
    return out


def _refine(d: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """One-step quadratic spatial refinement; offsets clamped to +-0.5."""
    gx = (d[r, c + 1] - d[r, c - 1]) / 2.0
    gy = (d[r + 1, c] - d[r - 1, c]) / 2.0
    hxx = d[r, c + 1] + d[r, c - 1] - 2 * d[r, c]
    hyy = d[r + 1, c] + d[r - 1, c] - 2 * d[r, c]
    hxy = (d[r + 1, c + 1] - d[r + 1, c - 1] - d[r - 1, c + 1] + d[r - 1, c - 1]) / 4.0
    det = hxx * hyy - hxy * hxy
    if abs(det) < 1e-12:
        return 0.0, 0.0
    ox = -(hyy * gx - hxy * gy) / det
    oy = -(hxx * gy - hxy * gx) / det
    return float(np.clip(ox, -0.5, 0.5)), float(np.clip(oy, -0.5, 0.5))


def _orientations(mag, ang, r, c, sigma):
    radius = int(round(3.0 * sigma))
    h, w = mag.shape
    r0, r1 = max(r - radius, 0), min(r + radius + 1, h)
    c0, c1 = max(c - radius, 0), min(c + radius + 1, w)
    m = mag[r0:r1, c0:c1]
    a = ang[r0:r1, c0:c1]
    yy, xx = np.mgrid[r0 - r : r1 - r, c0 - c : c1 - c]
    weight = np.exp(-(xx**2 + yy**2) / (2.0 * (1.5 * sigma) ** 2))
    bins = np.floor((a + np.pi) / (2 * np.pi) * N_ORI_BINS).astype(int) % N_ORI_BINS
    hist = np.bincount(bins.ravel(), weights=(m * weight).ravel(), minlength=N_ORI_BINS)
    # circular smoothing
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peaks = []
    hmax = hist.max()
    if hmax <= 0:
        return peaks
    for i in range(N_ORI_BINS):
        left, right = hist[(i - 1) % N_ORI_BINS], hist[(i + 1) % N_ORI_BINS]
        if hist[i] >= 0.8 * hmax and hist[i] > left and hist[i] > right:
            denom = left - 2 * hist[i] + right
            off = 0.5 * (left - right) / denom if abs(denom) > 1e-12 else 0.0
            theta = (i + 0.5 + off) / N_ORI_BINS * 2 * np.pi - np.pi
            peaks.append(theta)
    return peaks


def _descriptor(mag, ang, x, y, sigma, theta):
    """4x4 spatial x 8 orientation histogram over a rotated 16x16 sample grid."""
    h, w = mag.shape
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    spacing = 3.0 * sigma / 4.0  # one histogram cell spans 4 samples
    hist = np.zeros((DESC_WIDTH, DESC_WIDTH, DESC_ORI_BINS))
    grid = np.arange(-7.5, 8.0)  # 16 samples per axis
    gu, gv = np.meshgrid(grid, grid, indexing="xy")
    # rotate sample offsets into image coordinates
    dx = spacing * (cos_t * gu - sin_t * gv)
    dy = spacing * (sin_t * gu + cos_t * gv)
    sx, sy = x + dx, y + dy
    valid = (sx >= 1) & (sx < w - 1) & (sy >= 1) & (sy < h - 1)
    xi, yi = np.clip(sx, 1, w - 2), np.clip(sy, 1, h - 2)
    coords = np.stack([yi.ravel(), xi.ravel()])
    m = ndimage.map_coordinates(mag, coords, order=1).reshape(gu.shape)
    a = ndimage.map_coordinates(ang, coords, order=0).reshape(gu.shape)
    m = m * valid * np.exp(-(gu**2 + gv**2) / (2.0 * 8.0**2))
    rel = (a - theta + np.pi) % (2 * np.pi)  # orientation relative to keypoint
    ori = rel / (2 * np.pi) * DESC_ORI_BINS
    cell_u = (gu + 8.0) / 4.0 - 0.5
    cell_v = (gv + 8.0) / 4.0 - 0.5
    # bilinear spatial + linear orientation soft binning
    for du in (0, 1):
        for dv in (0, 1):
            iu = np.floor(cell_u).astype(int) + du
            iv = np.floor(cell_v).astype(int) + dv
            wu = 1.0 - np.abs(cell_u - iu)
            wv = 1.0 - np.abs(cell_v - iv)
            ok = (iu >= 0) & (iu < DESC_WIDTH) & (iv >= 0) & (iv < DESC_WIDTH) & (wu > 0) & (wv > 0)
            for do in (0, 1):
                io = (np.floor(ori).astype(int) + do) % DESC_ORI_BINS
                wo = 1.0 - np.abs(ori - (np.floor(ori) + do))
                wgt = m * wu * wv * np.clip(wo, 0.0, 1.0) * ok
                np.add.at(hist, (iv[ok], iu[ok], io[ok]), wgt[ok])
    vec = hist.ravel()
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    vec = np.minimum(vec / norm, 0.2)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 1e-12 else None


def detect_and_describe(gray: np.ndarray) -> list[Keypoint]:
    """Detect scale-space extrema in a (H, W) [0, 1] image and describe them.

    Raises ImageTooSmall below 32x32. A constant image yields no keypoints.
    """
    if gray.ndim != 2:
        raise ImageTooSmall(f"expected (H, W) grayscale image, got shape {gray.shape}")
    if min(gray.shape) < 32:
        raise ImageTooSmall(f"image {gray.shape} is below the 32x32 minimum")
    octaves, sigmas = _gaussian_pyramid(gray)
    keypoints: list[Keypoint] = []
    for o, imgs in enumerate(octaves):
        dogs = [b - a for a, b in zip(imgs, imgs[1:])]
        grads = {}
        for s, r, c in _find_extrema(dogs):
            ox, oy = _refine(dogs[s], r, c)
            if s not in grads:
                gy, gx = np.gradient(imgs[s])
                grads[s] = (np.hypot(gx, gy), np.arctan2(gy, gx))
            mag, ang = grads[s]
            sigma = sigmas[s]
            for theta in _orientations(mag, ang, r, c, sigma):
                desc = _descriptor(mag, ang, c + ox, r + oy, sigma, theta)
                if desc is None:
                    continue
                scale_mul = 2.0**o
                keypoints.append(
                    Keypoint(
                        x=(c + ox) * scale_mul,
                        y=(r + oy) * scale_mul,
                        scale=sigma * scale_mul,
                        orientation=theta,
                        descriptor=desc,
                    )
                )
    return keypoints
