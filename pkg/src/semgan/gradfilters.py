"""Fixed 3x3 gradient filters, semantic label maps, and boundary masks.

Image gradients use the Sobel pair; label maps use a border-safe pair
whose response never reaches across the image edge under reflect padding,
so no spurious boundary is detected along the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor

IMAGE_FILTER = "image_filter"
LABEL_FILTER = "label_filter"


@dataclass(frozen=True)
class FilterPair:
    """A horizontal/vertical pair of fixed 3x3 convolution kernels."""

    cx: np.ndarray
    cy: np.ndarray
    role: str

    def __post_init__(self):
        for name, k in (("cx", self.cx), ("cy", self.cy)):
            if k.shape != (3, 3):
                raise ValueError(f"FilterPair.{name} must be 3x3, got {k.shape}")
            k.setflags(write=False)
        if self.role not in (IMAGE_FILTER, LABEL_FILTER):
            raise ValueError(f"unknown filter role {self.role!r}")


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel integer class ids of shape (batch, height, width)."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label maps are (batch, height, width); got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"label maps hold integer class ids, got dtype {arr.dtype}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}); "
                f"got range [{arr.min()}, {arr.max()}]"
            )
        arr = arr.astype(np.int32, copy=False)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape


def sobel_pair() -> FilterPair:
    """The image gradient filters."""
    cx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
    cy = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float32)
    return FilterPair(cx, cy, IMAGE_FILTER)


def label_grad_pair() -> FilterPair:
    """The label gradient filters; single-pixel reach keeps image borders clean."""
    cx = np.array([[0, 0, 0], [-1, 0, 1], [0, 0, 0]], dtype=np.float32)
    cy = np.array([[0, 1, 0], [0, 0, 0], [0, -1, 0]], dtype=np.float32)
    return FilterPair(cx, cy, LABEL_FILTER)


def _per_channel_kernel(k2d: np.ndarray, channels: int) -> Tensor:
    """Block-diagonal kernel applying one 3x3 filter to each channel."""
    kernel = np.zeros((channels, channels, 3, 3), dtype=np.float32)
    for c in range(channels):
        kernel[c, c] = k2d
    return Tensor(kernel)


def gradient_magnitude(image: Tensor, filters: FilterPair) -> Tensor:
    """Per-channel |cx * x| + |cy * x|, summed over channels into one
    response map. Spatial dims are preserved (zero padding 1)."""
    channels = image.shape[1]
    kx = _per_channel_kernel(filters.cx, channels)
    ky = _per_channel_kernel(filters.cy, channels)
    gx = engine.conv2d(image, kx, stride=1, padding="zero", pad_size=1)
    gy = engine.conv2d(image, ky, stride=1, padding="zero", pad_size=1)
    return engine.add(engine.sum_channels(engine.absolute(gx)),
                      engine.sum_channels(engine.absolute(gy)))


def boundary_mask(labels: LabelMap, filters: FilterPair) -> Tensor:
    """0-1 map marking pixels adjacent to a class change.

    |sign(cx * s)| + |sign(cy * s)| clamped to {0, 1}. Labels enter as
    gradient-blocked constants; reflect padding keeps borders quiet.
    """
    lab = Tensor(labels.data[:, None, :, :].astype(np.float32))
    kx = Tensor(filters.cx[None, None])
    ky = Tensor(filters.cy[None, None])
    gx = engine.conv2d(lab, kx, stride=1, padding="reflect", pad_size=1)
    gy = engine.conv2d(lab, ky, stride=1, padding="reflect", pad_size=1)
    combined = engine.add(engine.absolute(engine.sign(gx)),
                          engine.absolute(engine.sign(gy)))
    return engine.sign(combined)  # clamp {0,1,2} -> {0,1}
