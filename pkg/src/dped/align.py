"""Phone/DSLR pair alignment: descriptor matching, RANSAC homography,
warp-and-crop into the phone frame, and cross-correlation-driven 100x100
patch extraction. Also owns the on-disk patch-pack format.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio, sift
from .errors import (
    DegenerateConfiguration,
    EmptyIntersection,
    ImageTooSmall,
    IoError,
    SchemaError,
    ShapeError,
)

ROTATION_PAD = 4  # margin (px) so rotated window resampling stays in-bounds


@dataclass(frozen=True)
class AlignConfig:
    ransac_iters: int = 2000
    ransac_inlier_px: float = 3.0
    ratio_test: float = 0.8
    patch_size: int = 100
    cc_threshold: float = 0.9
    max_shift: int = 5
    rotation_range: float = 1.5
    rotation_step: float = 0.5


@dataclass
class PatchPair:
    """Aligned (phone, DSLR) training patch with its alignment metadata."""

    source: np.ndarray  # (3, P, P) phone patch after shift/rotation adjustment
    target: np.ndarray  # (3, P, P) DSLR patch
    cc: float
    shift_x: int
    shift_y: int
    rotation: float  # degrees
    origin: tuple[str, int, int]  # (image id, window row, window col)


def match_descriptors(
    a: list[sift.Keypoint], b: list[sift.Keypoint], ratio: float = 0.8
) -> list[tuple[int, int]]:
    """Mutual nearest neighbors passing the Lowe ratio test."""
    if not (0.0 < ratio <= 1.0):
        raise ValueError("ratio must be in (0, 1]")
    if not a or not b:
        return []
    da = np.stack([kp.descriptor for kp in a])
    db = np.stack([kp.descriptor for kp in b])
    d2 = (
        np.sum(da**2, axis=1)[:, None]
        + np.sum(db**2, axis=1)[None, :]
        - 2.0 * da @ db.T
    )
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    matches = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        if db.shape[0] >= 2:
            row = d2[i].copy()
            row[j] = np.inf
            second = row.min()
            if not np.sqrt(max(d2[i, j], 0.0)) < ratio * np.sqrt(max(second, 0.0)):
                continue
        matches.append((i, int(j)))
    return matches


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateConfiguration("coincident points")
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    homog = np.column_stack([pts, np.ones(len(pts))])
    return (homog @ T.T)[:, :2], T


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized direct linear transform; maps src -> dst."""
    src_n, Ts = _normalize_points(src)
    dst_n, Td = _normalize_points(dst)
    rows = []
    for (x, y), (u, v) in zip(src_n, dst_n):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ H @ Ts
    if abs(H[2, 2]) < 1e-12:
        raise DegenerateConfiguration("degenerate homography")
    return H / H[2, 2]


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homog = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    w = homog[:, 2:]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    return homog[:, :2] / w


def estimate_homography_ransac(
    matches: np.ndarray, cfg: AlignConfig = AlignConfig(), seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC homography from an (N, 4) array of (x_src, y_src, x_dst, y_dst).

    Returns (H, inlier_mask); H maps source to destination coordinates and is
    normalized to H[2,2] = 1. Deterministic for a fixed seed.
    """
    matches = np.asarray(matches, dtype=np.float64)
    if matches.ndim != 2 or matches.shape[1] != 4 or matches.shape[0] < 4:
        raise DegenerateConfiguration("at least 4 matches are required")
    src, dst = matches[:, :2], matches[:, 2:]
    rng = np.random.default_rng(seed)
    n = len(matches)
    best_mask = None
    best_count = 0
    for _ in range(cfg.ransac_iters):
        idx = rng.choice(n, size=4, replace=False)
        try:
            H = _dlt(src[idx], dst[idx])
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            continue
        err = np.sqrt(((_project(H, src) - dst) ** 2).sum(axis=1))
        mask = err < cfg.ransac_inlier_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < 4:
        raise DegenerateConfiguration("no model with at least 4 inliers")
    H = _dlt(src[best_mask], dst[best_mask])
    # refit can move marginal points; recompute the mask once for reporting
    err = np.sqrt(((_project(H, src) - dst) ** 2).sum(axis=1))
    final_mask = err < cfg.ransac_inlier_px
    if final_mask.sum() < 4:
        final_mask = best_mask
    return H, final_mask


def warp_and_crop(
    phone: np.ndarray, dslr: np.ndarray, H: np.ndarray, min_overlap: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Warp the DSLR image into the phone frame and crop both to the shared
    axis-aligned valid region.

    `H` maps DSLR (x, y) coordinates to phone coordinates; the phone image is
    never resampled. Returns (phone_crop, dslr_crop) of identical size.
    """
    imageio.validate_rgb(phone)
    imageio.validate_rgb(dslr)
    ph, pw = phone.shape[1:]
    dh, dw = dslr.shape[1:]
    corners = np.array([[0, 0], [dw - 1, 0], [0, dh - 1], [dw - 1, dh - 1]], dtype=np.float64)
    proj = _project(H, corners)  # TL, TR, BL, BR in phone frame
    left = int(np.ceil(max(proj[0, 0], proj[2, 0], 0)))
    right = int(np.floor(min(proj[1, 0], proj[3, 0], pw - 1)))
    top = int(np.ceil(max(proj[0, 1], proj[1, 1], 0)))
    bottom = int(np.floor(min(proj[2, 1], proj[3, 1], ph - 1)))
    if right - left + 1 < min_overlap or bottom - top + 1 < min_overlap:
        raise EmptyIntersection(
            f"overlap {right - left + 1}x{bottom - top + 1} below {min_overlap}px"
        )
    Hinv = np.linalg.inv(H)
    xs = np.arange(left, right + 1, dtype=np.float64)
    ys = np.arange(top, bottom + 1, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    src = _project(Hinv, pts)
    coords = np.stack([src[:, 1], src[:, 0]])  # (row, col) order
    warped = np.empty((3, len(ys), len(xs)), dtype=np.float64)
    for c in range(3):
        warped[c] = ndimage.map_coordinates(
            dslr[c].astype(np.float64), coords, order=3, mode="nearest"
        ).reshape(len(ys), len(xs))
    warped = np.clip(warped, 0.0, 1.0).astype(phone.dtype)
    phone_crop = phone[:, top : bottom + 1, left : right + 1].copy()
    return phone_crop, warped


def cross_correlation(a: np.ndarray, b: np.ndarray, *, return_flag: bool = False):
    """Zero-normalized cross-correlation of two equal-size grayscale patches.

    Constant patches have no defined score; they report 0.0 (with the
    zero-variance flag when `return_flag` is set).
    """
    if a.shape != b.shape:
        raise ShapeError(f"patch shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    da, db_ = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da**2).mean()), np.sqrt((db_**2).mean())
    if sa < 1e-12 or sb < 1e-12:
        return (0.0, True) if return_flag else 0.0
    score = float((da * db_).mean() / (sa * sb))
    score = float(np.clip(score, -1.0, 1.0))
    return (score, False) if return_flag else score


def _rotation_grid(cfg: AlignConfig) -> list[float]:
    n = int(round(cfg.rotation_range / cfg.rotation_step))
    angles = [i * cfg.rotation_step for i in range(-n, n + 1)]
    return sorted(angles, key=lambda t: (abs(t), t))


def _shift_grid(cfg: AlignConfig) -> list[tuple[int, int]]:
    s = cfg.max_shift
    shifts = [(dy, dx) for dy in range(-s, s + 1) for dx in range(-s, s + 1)]
    return sorted(shifts, key=lambda t: (t[0] ** 2 + t[1] ** 2, t))


def extract_patch_pairs(
    phone_aligned: np.ndarray,
    dslr_aligned: np.ndarray,
    cfg: AlignConfig = AlignConfig(),
    image_id: str = "",
) -> list[PatchPair]:
    """Slide a non-overlapping window over both images in lockstep; per window,
    grid-search integer shifts and small rotations of the phone window to
    maximize grayscale ZNCC against the DSLR window, keeping pairs whose best
    score clears the threshold.
    """
    if phone_aligned.shape != dslr_aligned.shape:
        raise ShapeError("aligned images must have identical shapes")
    p = cfg.patch_size
    _, h, w = phone_aligned.shape
    if h < p or w < p:
        raise ImageTooSmall(f"image {h}x{w} smaller than patch size {p}")

    gray_p = imageio.to_grayscale(phone_aligned).astype(np.float64)
    gray_d = imageio.to_grayscale(dslr_aligned).astype(np.float64)
    pad = cfg.max_shift + ROTATION_PAD
    gray_p_pad = np.pad(gray_p, pad, mode="reflect")
    rgb_p_pad = np.pad(phone_aligned.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)), mode="reflect")

    angles = _rotation_grid(cfg)
    shifts = _shift_grid(cfg)
    pairs: list[PatchPair] = []
    for r0 in range(0, h - p + 1, p):
        for c0 in range(0, w - p + 1, p):
            window_d = gray_d[r0 : r0 + p, c0 : c0 + p]
            dd = window_d - window_d.mean()
            sd = np.sqrt((dd**2).mean())
            if sd < 1e-12:
                continue
            # padded neighborhood covering all shifted/rotated candidates
            neigh = gray_p_pad[r0 : r0 + p + 2 * pad, c0 : c0 + p + 2 * pad]
            best = (-2.0, 0, 0, 0.0)  # cc, dy, dx, angle
            for angle in angles:
                rot = neigh if angle == 0.0 else ndimage.rotate(
                    neigh, angle, reshape=False, order=1, mode="nearest"
                )
                for dy, dx in shifts:
                    if not (0 <= r0 + dy and r0 + dy + p <= h and 0 <= c0 + dx and c0 + dx + p <= w):
                        continue
                    cand = rot[pad + dy : pad + dy + p, pad + dx : pad + dx + p]
                    dc = cand - cand.mean()
                    sc = np.sqrt((dc**2).mean())
                    if sc < 1e-12:
                        continue
                    cc = (dc * dd).mean() / (sc * sd)
                    if cc > best[0]:
                        best = (float(cc), dy, dx, angle)
            cc, dy, dx, angle = best
            if cc <= cfg.cc_threshold:
                continue
            neigh_rgb = rgb_p_pad[:, r0 : r0 + p + 2 * pad, c0 : c0 + p + 2 * pad]
            if angle != 0.0:
                neigh_rgb = np.stack(
                    [
                        ndimage.rotate(neigh_rgb[c], angle, reshape=False, order=1, mode="nearest")
                        for c in range(3)
                    ]
                )
            source = neigh_rgb[:, pad + dy : pad + dy + p, pad + dx : pad + dx + p]
            source = np.clip(source, 0.0, 1.0).astype(phone_aligned.dtype)
            pairs.append(
                PatchPair(
                    source=source,
                    target=dslr_aligned[:, r0 : r0 + p, c0 : c0 + p].copy(),
                    cc=cc,
                    shift_x=dx,
                    shift_y=dy,
                    rotation=angle,
                    origin=(image_id, r0, c0),
                )
            )
    return pairs


def align_pair(
    phone: np.ndarray,
    dslr: np.ndarray,
    cfg: AlignConfig = AlignConfig(),
    seed: int = 0,
    image_id: str = "",
    detector=sift.detect_and_describe,
) -> list[PatchPair]:
    """Full matching pipeline for one photo pair: keypoints, matching,
    RANSAC homography (DSLR -> phone), warp/crop, patch extraction."""
    kp_p = detector(imageio.to_grayscale(phone))
    kp_d = detector(imageio.to_grayscale(dslr))
    matched = match_descriptors(kp_d, kp_p, cfg.ratio_test)
    if len(matched) < 4:
        raise DegenerateConfiguration(
            f"only {len(matched)} descriptor matches for image {image_id!r}"
        )
    pts = np.array(
        [[kp_d[i].x, kp_d[i].y, kp_p[j].x, kp_p[j].y] for i, j in matched], dtype=np.float64
    )
    H, _ = estimate_homography_ransac(pts, cfg, seed)
    phone_crop, dslr_crop = warp_and_crop(phone, dslr, H)
    return extract_patch_pairs(phone_crop, dslr_crop, cfg, image_id=image_id)


# ---------------------------------------------------------------------------
# Patch-pack on-disk format
# ---------------------------------------------------------------------------

INDEX_COLUMNS = ["pair_id", "origin_image", "row", "col", "shift_x", "shift_y", "rotation_deg", "cc"]


def split_images(image_ids: list[str], seed: int = 0) -> dict[str, list[str]]:
    """Deterministic by-photograph train/val/test split, roughly 90/5/5.

    Fewer than 3 source images puts everything in train.
    """
    ids = sorted(set(image_ids))
    if len(ids) < 3:
        return {"train": ids, "val": [], "test": []}
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_test = max(1, round(0.05 * len(ids)))
    n_val = max(1, round(0.05 * len(ids)))
    return {
        "test": sorted(perm[:n_test]),
        "val": sorted(perm[n_test : n_test + n_val]),
        "train": sorted(perm[n_test + n_val :]),
    }


def write_patch_pack(pairs: list[PatchPair], out_dir, seed: int = 0) -> dict:
    """Write index.csv, patches/<pair_id>_{src,dst}.png, and summary.json."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    rows = []
    for n, pair in enumerate(pairs):
        pair_id = f"{n:06d}"
        imageio.save_image(pair.source.astype(np.float32), out / "patches" / f"{pair_id}_src.png")
        imageio.save_image(pair.target.astype(np.float32), out / "patches" / f"{pair_id}_dst.png")
        rows.append(
            [pair_id, pair.origin[0], pair.origin[1], pair.origin[2], pair.shift_x, pair.shift_y, pair.rotation, f"{pair.cc:.6f}"]
        )
    with open(out / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(INDEX_COLUMNS)
        writer.writerows(rows)
    hist_edges = np.linspace(-1.0, 1.0, 21)
    hist, _ = np.histogram([p.cc for p in pairs], bins=hist_edges)
    summary = {
        "n_pairs": len(pairs),
        "n_images": len({p.origin[0] for p in pairs}),
        "cc_histogram": {"edges": hist_edges.tolist(), "counts": hist.tolist()},
        "split_seed": seed,
        "split": split_images([p.origin[0] for p in pairs], seed),
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return summary


class PatchPack:
    """Reader for a prepared patch-pack directory."""

    def __init__(self, root):
        self.root = Path(root)
        index = self.root / "index.csv"
        summary = self.root / "summary.json"
        if not index.exists() or not summary.exists():
            raise IoError(f"not a patch pack (missing index.csv/summary.json): {root}")
        with open(index, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != INDEX_COLUMNS:
                raise SchemaError(f"unexpected index.csv columns in {root}")
            self.rows = list(reader)
        with open(summary) as f:
            self.summary = json.load(f)
        self.split = self.summary.get("split", {"train": [], "val": [], "test": []})

    def pair_ids(self, split: str | None = None) -> list[str]:
        if split is None or split == "all":
            return [r["pair_id"] for r in self.rows]
        images = set(self.split.get(split, []))
        return [r["pair_id"] for r in self.rows if r["origin_image"] in images]

    def load_pair(self, pair_id: str) -> tuple[np.ndarray, np.ndarray]:
        src = imageio.load_image(self.root / "patches" / f"{pair_id}_src.png")
        dst = imageio.load_image(self.root / "patches" / f"{pair_id}_dst.png")
        return src, dst
