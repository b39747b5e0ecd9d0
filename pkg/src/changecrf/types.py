"""Image pairs, pixel labelings and the colour-difference map.

Pixels are indexed row-major, ``j = row * W + col``, everywhere in the
package.  Labels are 0 (no change) and 1 (change).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT3 = float(np.sqrt(3.0))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImagePair:
    """Two co-sized RGB images with channels scaled to [0, 1]."""

    image_a: np.ndarray
    image_b: np.ndarray
    id: str = ""

    def __post_init__(self):
        a = _frozen(self.image_a)
        b = _frozen(self.image_b)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got shape {a.shape}")
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("images contain non-finite values")
        if a.min() < 0.0 or b.min() < 0.0 or a.max() > 1.0 or b.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")
        object.__setattr__(self, "image_a", a)
        object.__setattr__(self, "image_b", b)

    @classmethod
    def from_uint8(cls, image_a: np.ndarray, image_b: np.ndarray, id: str = "") -> "ImagePair":
        return cls(np.asarray(image_a) / 255.0, np.asarray(image_b) / 255.0, id)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image_a.shape[:2]

    @property
    def n_pixels(self) -> int:
        h, w = self.shape
        return h * w

    def image(self, which: str) -> np.ndarray:
        if which == "a":
            return self.image_a
        if which == "b":
            return self.image_b
        raise ValueError(f"unknown image tag {which!r}")


def difference_map(pair: ImagePair) -> np.ndarray:
    """Per-pixel Euclidean norm of the RGB difference, shape (H, W)."""
    return np.sqrt(np.sum((pair.image_a - pair.image_b) ** 2, axis=2))


def color_difference(pair: ImagePair, j: int) -> float:
    """Colour difference at row-major pixel index ``j``; lies in [0, sqrt(3)]."""
    h, w = pair.shape
    if not 0 <= j < h * w:
        raise IndexError(f"pixel index {j} out of range for {h}x{w} image")
    row, col = divmod(int(j), w)
    diff = pair.image_a[row, col] - pair.image_b[row, col]
    return float(np.sqrt(np.dot(diff, diff)))


def as_labeling(labels: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a binary label map and return it as a uint8 array."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"label map shape {arr.shape} does not match {tuple(shape)}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("label map entries must be 0 or 1")
    return arr.astype(np.uint8)


def foreground_proportion(labels: np.ndarray, roi: np.ndarray | None = None) -> float:
    """Fraction of label-1 pixels, counted inside ``roi`` when given.

    ``roi`` is a boolean map with True for pixels that are scored.
    """
    labels = as_labeling(labels)
    if roi is None:
        return float(labels.mean())
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != labels.shape:
        raise ValueError(f"ROI shape {roi.shape} does not match labels {labels.shape}")
    count = int(roi.sum())
    if count == 0:
        raise ValueError("ROI is empty")
    return float(labels[roi].sum() / count)
