"""Axis-aligned box arithmetic and pixel-grid cropping.

Boxes live in pixel space with the origin at the top-left corner.  ``x`` grows
to the right and ``y`` grows downward; ``(x1, y1)`` is the top-left corner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox

EPS = 1e-12


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def normalized(self) -> "BBox":
        """Swap reversed corners so that x1 <= x2 and y1 <= y2."""
        return BBox(min(self.x1, self.x2), min(self.y1, self.y2),
                    max(self.x1, self.x2), max(self.y1, self.y2))

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """Image payload as an ``(height, width, channels)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim == 2:
            object.__setattr__(self, "pixels", self.pixels[:, :, None])
        if self.pixels.ndim != 3 or self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ValueError(f"pixel payload must be non-empty HxWxC, got {self.pixels.shape}")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    def __eq__(self, other):
        if not isinstance(other, PixelGrid):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def pixel(self, x: int, y: int) -> np.ndarray:
        return self.pixels[y, x]


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def clamp_bbox(b: BBox, width: float, height: float) -> BBox:
    """Normalize ``b`` and clip it into ``[0, width] x [0, height]``.

    Raises DegenerateBox when nothing of positive area is left.
    """
    if not (width > 0 and height > 0):
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    n = b.normalized()
    out = BBox(min(max(n.x1, 0.0), width), min(max(n.y1, 0.0), height),
               min(max(n.x2, 0.0), width), min(max(n.y2, 0.0), height))
    if out.area <= 0:
        raise DegenerateBox(f"{b} has zero area inside {width}x{height}")
    return out


def crop(img: PixelGrid, b: BBox) -> PixelGrid:
    # No resampling on zoom-in: the region is returned at native resolution.
    x1, y1 = round_half_up(b.x1), round_half_up(b.y1)
    x2, y2 = round_half_up(b.x2), round_half_up(b.y2)
    x1, x2 = max(x1, 0), min(x2, img.width)
    y1, y2 = max(y1, 0), min(y2, img.height)
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBox(f"crop of {b} is empty")
    return PixelGrid(img.pixels[y1:y2, x1:x2].copy())


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / max(union, EPS)


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the hull fraction not covered by the union."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    value = iou(a, b)
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if hull <= EPS:
        return value
    return value - (hull - max(union, 0.0)) / hull
