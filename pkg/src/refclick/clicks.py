"""User clicks and their encoding into the model's extra input maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import maskops

POSITIVE = "positive"
NEGATIVE = "negative"

# Disk radius at network input resolution. Convention inherited from the
# click-encoding lineage this model follows; the radius is configurable
# everywhere it is consumed.
DISK_RADIUS = 5


@dataclass(frozen=True)
class Click:
    """A single user interaction: position, polarity, 1-based order."""

    row: int
    col: int
    polarity: str
    order: int

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be {POSITIVE!r} or {NEGATIVE!r}, got {self.polarity!r}")
        if self.order < 1:
            raise ValueError(f"click order is 1-based, got {self.order}")

    @property
    def is_positive(self) -> bool:
        return self.polarity == POSITIVE


def validate_clicks(clicks: Sequence[Click], height: int, width: int) -> None:
    """Check bounds and that order fields are contiguous from 1."""
    for c in clicks:
        if not (0 <= c.row < height and 0 <= c.col < width):
            raise ValueError(f"click ({c.row}, {c.col}) outside {height}x{width} image")
    orders = sorted(c.order for c in clicks)
    if orders != list(range(1, len(clicks) + 1)):
        raise ValueError(f"click orders must be contiguous from 1, got {orders}")


def rasterize_disks(
    clicks: Iterable[Click],
    polarity: str,
    height: int,
    width: int,
    radius: int = DISK_RADIUS,
) -> np.ndarray:
    """Union of filled disks around the clicks of one polarity.

    Pixel (r, c) is foreground iff (r - row)^2 + (c - col)^2 <= radius^2
    for some matching click; disks are clipped at the image border.
    """
    out = np.zeros((height, width), dtype=np.uint8)
    r2 = radius * radius
    for c in clicks:
        if c.polarity != polarity:
            continue
        r0 = max(0, c.row - radius)
        r1 = min(height, c.row + radius + 1)
        c0 = max(0, c.col - radius)
        c1 = min(width, c.col + radius + 1)
        rr, cc = np.ogrid[r0:r1, c0:c1]
        out[r0:r1, c0:c1] |= ((rr - c.row) ** 2 + (cc - c.col) ** 2 <= r2).astype(np.uint8)
    return out


def assemble_extra_maps(
    clicks: Sequence[Click],
    prev: np.ndarray,
    radius: int = DISK_RADIUS,
) -> np.ndarray:
    """Stack the 3 extra channels: positive disks, negative disks, previous prediction.

    Returns a float32 array of shape (3, H, W); channel dimensions follow
    ``prev``, which must match the target image.
    """
    prev = maskops.as_softmask(prev)
    h, w = prev.shape
    validate_clicks(clicks, h, w)
    pos = rasterize_disks(clicks, POSITIVE, h, w, radius)
    neg = rasterize_disks(clicks, NEGATIVE, h, w, radius)
    return np.stack([pos.astype(np.float32), neg.astype(np.float32), prev])
