"""Exception hierarchy shared by all dped modules."""


class DpedError(Exception):
    """Base class for all errors raised by this package."""


class IoError(DpedError):
    """File missing, unreadable, or unwritable."""


class DecodeError(DpedError):
    """Image file is corrupt or in an unsupported format."""


class InvalidSpec(DpedError):
    """A kernel/config specification violates its invariants."""


class KernelTooLarge(DpedError):
    """Blur kernel does not fit inside the image."""


class InvalidSize(DpedError):
    """Requested resample size is out of range."""


class ImageTooSmall(DpedError):
    """Image is below the minimum size for the operation."""


class ShapeError(DpedError):
    """Tensor/image shapes do not match the operation's contract."""


class DegenerateConfiguration(DpedError):
    """Too few (or collinear) correspondences for a homography."""


class EmptyIntersection(DpedError):
    """Warped image pair has no usable overlap."""


class SchemaError(DpedError):
    """Weights container or dataset manifest fails validation."""


class UnknownLayer(DpedError):
    """Requested feature layer does not exist in the network."""


class StaleTape(DpedError):
    """Backward requested without a matching recorded forward pass."""


class NonFiniteGradient(DpedError):
    """A gradient contains NaN or Inf."""


class NonFiniteLoss(DpedError):
    """A loss value became NaN or Inf; training aborts."""


class NonFiniteComponent(DpedError):
    """A loss component passed to the total is NaN or Inf."""


class EmptyDataset(DpedError):
    """Dataset or corpus has no usable entries."""


class ZeroVariance(DpedError):
    """Cross-correlation undefined: at least one patch is constant."""
