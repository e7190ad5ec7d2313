"""Phone-to-DSLR photo enhancement: dataset alignment, adversarial training
with a composite perceptual loss, full-resolution inference, and evaluation."""

__version__ = "0.1.0"

from . import align, container, errors, evaluation, imageio, losses, nets, sift, train  # noqa: F401
