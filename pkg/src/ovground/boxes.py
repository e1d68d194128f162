"""Axis-aligned box types and conversions.

Two parameterizations are used throughout:

* :class:`BBox` stores pixel corners ``(x1, y1, x2, y2)`` with ``(x1, y1)``
  the top-left and ``(x2, y2)`` the bottom-right corner.  Coordinates may
  fall outside the image only on predicted boxes prior to clipping.
* :class:`NormBox` stores center and size as fractions of the image
  dimensions, the currency of box regression heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ovground.errors import InputError


@dataclass(frozen=True)
class BBox:
    """Corner-form box in pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InputError(f"BBox.{name} must be finite, got {v!r}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InputError(
                f"BBox corners out of order: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def clip(self, image_width: float, image_height: float) -> "BBox":
        """Clamp all corners to ``[0, w] x [0, h]``."""
        x1 = min(max(self.x1, 0.0), image_width)
        y1 = min(max(self.y1, 0.0), image_height)
        x2 = min(max(self.x2, 0.0), image_width)
        y2 = min(max(self.y2, 0.0), image_height)
        return BBox(x1, y1, x2, y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class NormBox:
    """Center-size box in image fractions; all fields in [0, 1], w,h > 0."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InputError(f"NormBox.{name} must be finite, got {v!r}")
            if not 0.0 <= v <= 1.0:
                raise InputError(f"NormBox.{name} must lie in [0, 1], got {v!r}")
        if self.w <= 0.0 or self.h <= 0.0:
            raise InputError(f"NormBox is degenerate: w={self.w}, h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def bbox_to_norm(box: BBox, image_width: float, image_height: float) -> NormBox:
    """Convert a corner box to center-size fractions of the image."""
    if image_width <= 0 or image_height <= 0:
        raise InputError(
            f"image dimensions must be positive, got {image_width} x {image_height}"
        )
    return NormBox(
        cx=(box.x1 + box.x2) / (2.0 * image_width),
        cy=(box.y1 + box.y2) / (2.0 * image_height),
        w=box.width / image_width,
        h=box.height / image_height,
    )


def norm_to_bbox(
    norm: NormBox, image_width: float, image_height: float, clip: bool = False
) -> BBox:
    """Convert center-size fractions back to a pixel corner box.

    With ``clip=True`` the corners are clamped to the image bounds, the
    policy applied to predicted boxes before IoU evaluation.
    """
    if image_width <= 0 or image_height <= 0:
        raise InputError(
            f"image dimensions must be positive, got {image_width} x {image_height}"
        )
    x1 = (norm.cx - norm.w / 2.0) * image_width
    x2 = (norm.cx + norm.w / 2.0) * image_width
    y1 = (norm.cy - norm.h / 2.0) * image_height
    y2 = (norm.cy + norm.h / 2.0) * image_height
    box = BBox(x1, y1, x2, y2)
    if clip:
        box = box.clip(image_width, image_height)
    return box
