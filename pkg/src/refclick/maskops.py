"""Deterministic primitives on binary and soft masks.

Masks are plain numpy arrays: binary masks ("bit masks") are 2-D uint8
arrays of {0, 1}, soft masks are 2-D float arrays in [0, 1]. All
tie-breaking is row-major (smallest row, then smallest column) so every
consumer of these primitives is bit-reproducible across runs.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import ndimage


class LabeledRegions(NamedTuple):
    """Connected-component labeling: 0 = background, labels 1..count."""

    labels: np.ndarray
    count: int


def as_bitmask(data) -> np.ndarray:
    """Validate and convert to a canonical uint8 {0,1} mask."""
    m = np.asarray(data)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"bit mask must be a nonempty 2-D grid, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("bit mask elements must be exactly 0 or 1")
    return m.astype(np.uint8, copy=False)


def as_softmask(data) -> np.ndarray:
    """Validate and convert to a float32 [0,1] mask."""
    m = np.asarray(data, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"soft mask must be a nonempty 2-D grid, got shape {m.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("soft mask elements must lie in [0, 1]")
    return m


def threshold(soft: np.ndarray, level: float = 0.5) -> np.ndarray:
    """Binarize a soft mask; strictly-greater comparison at the level."""
    return (np.asarray(soft) > level).astype(np.uint8)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two same-shape binary masks.

    Two empty masks give 1.0: the prediction is vacuously perfect.
    """
    a = as_bitmask(a)
    b = as_bitmask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return inter / union


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(m: np.ndarray, connectivity: int = 4) -> LabeledRegions:
    """Label connected foreground regions.

    Labels are assigned in row-major order of each component's first
    pixel, independent of the underlying labeling pass.
    """
    m = as_bitmask(m)
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    raw, n = ndimage.label(m, structure=_STRUCTURES[connectivity])
    if n == 0:
        return LabeledRegions(np.zeros(m.shape, dtype=np.int32), 0)
    # Canonical relabel: order by first occurrence in a row-major scan.
    flat = raw.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # reversed so earlier indices overwrite later ones
    first[flat[nz[::-1]]] = nz[::-1]
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[1 + order] = np.arange(1, n + 1, dtype=np.int32)
    return LabeledRegions(remap[raw], n)


def largest_component(m: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Binary mask of the biggest component; ties go to the smallest label."""
    regions = connected_components(m, connectivity)
    if regions.count == 0:
        return np.zeros(np.asarray(m).shape, dtype=np.uint8)
    sizes = np.bincount(regions.labels.ravel(), minlength=regions.count + 1)
    best = int(np.argmax(sizes[1:])) + 1  # argmax keeps the smallest label on ties
    return (regions.labels == best).astype(np.uint8)


def interior_center(m: np.ndarray) -> tuple[int, int]:
    """Foreground pixel farthest (exact Euclidean) from background or border.

    The image border counts as background, so the center is pushed inward.
    Ties break row-major.
    """
    m = as_bitmask(m)
    if not m.any():
        raise ValueError("interior_center of an empty mask is undefined")
    padded = np.pad(m, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    dist[m == 0] = -1.0
    idx = int(np.argmax(dist))  # first occurrence wins: row-major tie-break
    return (idx // m.shape[1], idx % m.shape[1])


def downsample_area(m: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsampling; pads with zeros to a factor multiple.

    Fractional output values keep thin structures from vanishing; total
    mass is preserved: sum(out) * factor**2 == sum(in).
    """
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    h, w = m.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        m = np.pad(m, ((0, ph), (0, pw)))
    oh, ow = m.shape[0] // factor, m.shape[1] // factor
    # float64 keeps the mass-preservation identity sum(out) * factor**2 == sum(in)
    return m.reshape(oh, factor, ow, factor).mean(axis=(1, 3))


def rle_encode(m: np.ndarray) -> str:
    """Encode a binary mask as ``"{H}x{W}:"`` + comma-separated run lengths.

    Runs alternate background/foreground starting with background over a
    row-major scan; a leading foreground pixel yields a first run of 0.
    """
    m = as_bitmask(m)
    h, w = m.shape
    flat = m.ravel()
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return f"{h}x{w}:" + ",".join(str(r) for r in runs)


def rle_decode(s: str) -> np.ndarray:
    """Inverse of :func:`rle_encode`; raises ValueError on malformed input."""
    if not isinstance(s, str):
        raise ValueError("RLE payload must be a string")
    head, sep, body = s.partition(":")
    if not sep:
        raise ValueError("RLE string missing ':' separator")
    try:
        h_str, w_str = head.split("x")
        h, w = int(h_str), int(w_str)
    except ValueError:
        raise ValueError(f"malformed RLE header {head!r}") from None
    if h < 1 or w < 1:
        raise ValueError(f"RLE dimensions must be positive, got {h}x{w}")
    try:
        runs = [int(tok) for tok in body.split(",")] if body else []
    except ValueError:
        raise ValueError("RLE run lengths must be integers") from None
    if any(r < 0 for r in runs):
        raise ValueError("RLE run lengths must be non-negative")
    if sum(runs) != h * w:
        raise ValueError(f"RLE runs sum to {sum(runs)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for r in runs:
        if value:
            flat[pos : pos + r] = 1
        pos += r
        value ^= 1
    return flat.reshape(h, w)
