"""Shared fixtures: a random-weight VGG container, natural-image corpora from
scikit-image, and small synthetic patch datasets.

Tests that need VGG features use randomly initialized (He-scaled) weights in
the canonical layer shapes; feature-space distances from a random deep net
are still informative targets for the structural and gradient tests here.
"""

import numpy as np
import pytest
import torch
from skimage import data as skdata

from dped import container, nets

torch.set_num_threads(2)


def he_vgg_tensors(seed: int = 0) -> dict[str, np.ndarray]:
    """Random VGG-19 conv stack, fan-in-scaled, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for entry in nets.VGG19_LAYOUT:
        if entry == "pool":
            continue
        name, c_in, c_out = entry
        std = np.sqrt(2.0 / (c_in * 9))
        tensors[f"{name}.weight"] = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(np.float32)
        tensors[f"{name}.bias"] = np.zeros(c_out, dtype=np.float32)
    return tensors


@pytest.fixture(scope="session")
def vgg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "vgg19.dpedw"
    container.save_tensors(path, "vgg19", he_vgg_tensors())
    return path


@pytest.fixture(scope="session")
def vgg(vgg_path):
    return nets.vgg_load(vgg_path)


def skimage_rgb(name: str) -> np.ndarray:
    """A bundled scikit-image photo as a (3, H, W) float image in [0, 1]."""
    arr = getattr(skdata, name)()
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0


def crops(img: np.ndarray, size: int, stride: int) -> list[np.ndarray]:
    _, h, w = img.shape
    return [
        np.ascontiguousarray(img[:, r : r + size, c : c + size])
        for r in range(0, h - size + 1, stride)
        for c in range(0, w - size + 1, stride)
    ]


@pytest.fixture(scope="session")
def astronaut():
    return skimage_rgb("astronaut")


@pytest.fixture(scope="session")
def toy_pairs(astronaut):
    """Eight 100x100 (source, target) pairs with a fixed photometric gap."""
    rng = np.random.default_rng(7)
    pairs = []
    for _ in range(8):
        r, c = rng.integers(0, astronaut.shape[1] - 100, size=2)
        dst = astronaut[:, r : r + 100, c : c + 100].copy()
        src = (0.7 * dst + 0.05).astype(np.float32)
        pairs.append((src, dst))
    return pairs


@pytest.fixture(scope="session")
def small_disc_cfg():
    """Reduced discriminator for fast tests; same strides and 100px input."""
    return nets.DiscriminatorConfig(channels=(8, 12, 16, 16, 12), kernels=(11, 5, 3, 3, 3), fc_width=32)
