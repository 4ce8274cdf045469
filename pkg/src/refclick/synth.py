"""Procedural part-composite dataset generator.

Renders desk-scale objects assembled from primitive parts (nested rings,
stacked and side-by-side arrangements, and touching object pairs) with
per-instance geometry and color jitter over cluttered backgrounds. Many
categories are deliberately ambiguous under a single center click: nested
parts and small-attachment composites share their interior-center pixel
with the whole object, so granularity is unrecoverable without reference
guidance.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import maskops
from .data import DatasetManifest, export_tda
from .sampling import PartObject, parts_connected


@dataclass
class SynthConfig:
    n_categories: int = 20
    instances_per_category: int = 40
    val_instances: int = 4
    test_instances: int = 0
    image_size: int = 128
    min_parts: int = 2
    max_parts: int = 3
    color_jitter: float = 1.0
    background_complexity: int = 6
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.min_parts <= self.max_parts <= 5):
            raise ValueError("part-count range must satisfy 1 <= min <= max <= 5")
        if self.image_size < 64:
            raise ValueError("image_size below 64 leaves no room for part geometry")


# -- primitive rasterizers -------------------------------------------------


def _grid(size: int):
    return np.mgrid[0:size, 0:size]


def _disk(size, cy, cx, r) -> np.ndarray:
    y, x = _grid(size)
    return (y - cy) ** 2 + (x - cx) ** 2 <= r * r


def _ellipse(size, cy, cx, ry, rx) -> np.ndarray:
    y, x = _grid(size)
    ry = max(ry, 1.0)
    rx = max(rx, 1.0)
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def _rect(size, r0, c0, r1, c1) -> np.ndarray:
    out = np.zeros((size, size), dtype=bool)
    r0, c0 = max(int(round(r0)), 0), max(int(round(c0)), 0)
    r1, c1 = min(int(round(r1)), size), min(int(round(c1)), size)
    if r1 > r0 and c1 > c0:
        out[r0:r1, c0:c1] = True
    return out


def _shape_in_box(size, kind, r0, c0, r1, c1) -> np.ndarray:
    """Rasterize a primitive inside the box [r0, r1) x [c0, c1)."""
    h, w = r1 - r0, c1 - c0
    cy, cx = (r0 + r1) / 2.0, (c0 + c1) / 2.0
    if kind == "rect":
        return _rect(size, r0, c0, r1, c1)
    if kind == "disk":
        return _disk(size, cy, cx, min(h, w) / 2.0)
    if kind == "ellipse":
        return _ellipse(size, cy, cx, h / 2.0, w / 2.0)
    if kind == "dome":  # half-disk, flat side down
        y, x = _grid(size)
        r = min(w / 2.0, h)
        return ((y - r1) ** 2 + (x - cx) ** 2 <= r * r) & (y <= r1) & (y >= r0)
    if kind == "tri_up":  # apex at top center, base along the bottom edge
        y, x = _grid(size)
        t = np.clip((y - r0) / max(h, 1.0), 0.0, 1.0)
        return (y >= r0) & (y < r1) & (np.abs(x - cx) <= t * w / 2.0)
    if kind == "tri_down":
        y, x = _grid(size)
        t = np.clip((r1 - y) / max(h, 1.0), 0.0, 1.0)
        return (y >= r0) & (y < r1) & (np.abs(x - cx) <= t * w / 2.0)
    if kind == "ring":
        r_out = min(h, w) / 2.0
        return _disk(size, cy, cx, r_out) & ~_disk(size, cy, cx, r_out * 0.55)
    raise ValueError(f"unknown primitive {kind!r}")


# -- category recipes -------------------------------------------------------
#
# Each recipe maps (rng, size, cy, cx, s) to an ordered list of
# (tag, bool mask); s is the object half-extent in pixels. `connected`
# lists the part-index pairs whose union must be one region, `separated`
# the pairs that must stay apart (validated after rendering).


def _concentric(tags, fracs, shape="disk", aspect=1.0):
    def build(rng, size, cy, cx, s):
        radii = [s * f * rng.uniform(0.92, 1.08) for f in fracs]
        radii = np.maximum.accumulate(radii)
        for i in range(1, len(radii)):
            radii[i] = max(radii[i], radii[i - 1] + 3.0)
        parts = []
        prev = None
        for tag, r in zip(tags, radii):
            if shape == "square":
                outer = _rect(size, cy - r, cx - r * aspect, cy + r, cx + r * aspect)
            else:
                outer = _ellipse(size, cy, cx, r, r * aspect)
            mask = outer if prev is None else (outer & ~prev)
            parts.append((tag, mask))
            prev = outer
        return parts

    n = len(tags)
    return build, [(i, i + 1) for i in range(n - 1)], [(i, j) for i in range(n) for j in range(i + 2, n)]


def _stacked(specs):
    """specs: (tag, shape, height_frac, width_frac) from top to bottom."""

    def build(rng, size, cy, cx, s):
        jit = [(h * rng.uniform(0.9, 1.1), w * rng.uniform(0.9, 1.1)) for _, _, h, w in specs]
        total = sum(h for h, _ in jit) * s
        top = cy - total / 2.0
        parts = []
        overlap = max(2.0, 0.05 * s)
        for (tag, shape, _, _), (h, w) in zip(specs, jit):
            r0, r1 = top, top + h * s
            half_w = w * s / 2.0
            parts.append((tag, _shape_in_box(size, shape, r0, cx - half_w, r1, cx + half_w)))
            top = r1 - overlap
        return parts

    n = len(specs)
    return build, [(i, i + 1) for i in range(n - 1)], [(i, j) for i in range(n) for j in range(i + 2, n)]


def _beside(specs, valign="middle"):
    """specs: (tag, shape, height_frac, width_frac) from left to right."""

    def build(rng, size, cy, cx, s):
        jit = [(h * rng.uniform(0.9, 1.1), w * rng.uniform(0.9, 1.1)) for _, _, h, w in specs]
        total = sum(w for _, w in jit) * s
        left = cx - total / 2.0
        tallest = max(h for h, _ in jit) * s
        parts = []
        overlap = max(2.0, 0.05 * s)
        for (tag, shape, _, _), (h, w) in zip(specs, jit):
            c0, c1 = left, left + w * s
            if valign == "top":
                r0 = cy - tallest / 2.0
            else:
                r0 = cy - h * s / 2.0
            parts.append((tag, _shape_in_box(size, shape, r0, c0, r0 + h * s, c1)))
            left = c1 - overlap
        return parts

    n = len(specs)
    return build, [(i, i + 1) for i in range(n - 1)], [(i, j) for i in range(n) for j in range(i + 2, n)]


def _recipe_table():
    table = []

    def add(name, built):
        build, connected, separated = built
        table.append((name, build, connected, separated))

    # nested parts: the inner center pixel is also the whole-object center
    add("bullseye", _concentric(["core", "mid", "rim"], [0.34, 0.67, 1.0]))
    add("wheel", _concentric(["hub", "tire"], [0.42, 1.0]))
    add("button", _concentric(["knob", "plate"], [0.26, 1.0]))
    add("egg", _concentric(["yolk", "white"], [0.4, 1.0], aspect=1.35))
    add("frame", _concentric(["inner", "border"], [0.5, 1.0], shape="square"))
    add("eye", _concentric(["pupil", "iris"], [0.33, 1.0], aspect=1.5))
    add("pond", _concentric(["island", "water"], [0.3, 1.0], aspect=1.2))
    add("boxes", _concentric(["small", "large", "hull"], [0.3, 0.62, 1.0], shape="square"))
    # stacked composites
    add("lollipop", _stacked([("candy", "disk", 0.95, 0.95), ("stick", "rect", 0.8, 0.14)]))
    add("mushroom", _stacked([("cap", "dome", 0.62, 1.3), ("stem", "rect", 0.8, 0.3)]))
    add("balloon", _stacked([("body", "ellipse", 1.05, 0.8), ("string", "rect", 0.75, 0.08)]))
    add("tree", _stacked([("crown", "tri_up", 1.05, 1.15), ("trunk", "rect", 0.55, 0.24)]))
    add("snowman", _stacked([("head", "disk", 0.5, 0.5), ("torso", "disk", 0.72, 0.72), ("base", "disk", 0.95, 0.95)]))
    add("pin", _stacked([("head", "disk", 0.8, 0.8), ("spike", "tri_down", 0.85, 0.5)]))
    add("lamp", _stacked([("shade", "tri_up", 0.7, 1.1), ("pole", "rect", 0.95, 0.12)]))
    add("beads", _stacked([("top", "disk", 0.55, 0.55), ("middle", "disk", 0.55, 0.55), ("bottom", "disk", 0.55, 0.55)]))
    add("arrow", _stacked([("tip", "tri_up", 0.75, 1.0), ("shaft", "rect", 1.0, 0.3)]))
    add("hammer", _stacked([("head", "rect", 0.42, 1.3), ("handle", "rect", 1.15, 0.26)]))
    # touching object pairs: object-level ambiguity
    add("ballbox", _stacked([("ball", "disk", 0.55, 0.55), ("box", "rect", 1.05, 1.3)]))
    add("cupsaucer", _stacked([("cup", "rect", 0.85, 0.65), ("saucer", "ellipse", 0.36, 1.4)]))
    add("dotbar", _stacked([("dot", "disk", 0.45, 0.45), ("bar", "rect", 0.5, 1.5)]))
    # side-by-side composites
    add("barbell", _beside([("left_plate", "rect", 1.0, 0.3), ("bar", "rect", 0.28, 1.1), ("right_plate", "rect", 1.0, 0.3)]))
    add("dumbbell", _beside([("left_ball", "disk", 0.62, 0.62), ("rod", "rect", 0.24, 0.9), ("right_ball", "disk", 0.62, 0.62)]))
    add("key", _beside([("bow", "ring", 0.8, 0.8), ("blade", "rect", 0.26, 1.1)]))
    add("flag", _beside([("pole", "rect", 1.7, 0.12), ("banner", "rect", 0.75, 1.0)], valign="top"))
    return table


def _part_color(cat_index: int, part_index: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    hue = ((cat_index * 0.61803) + part_index * 0.23) % 1.0
    hue = (hue + rng.uniform(-0.03, 0.03) * jitter) % 1.0
    sat = np.clip(0.75 + rng.uniform(-0.2, 0.2) * jitter, 0.35, 1.0)
    val = np.clip(0.8 + rng.uniform(-0.2, 0.15) * jitter, 0.35, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255.0


def _render_background(rng: np.random.Generator, size: int, complexity: int, jitter: float) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.25), rng.uniform(0.25, 0.75))) * 255.0
    canvas = np.tile(base, (size, size, 1))
    ramp = np.linspace(-1.0, 1.0, size)
    direction = rng.integers(2)
    grad = ramp[:, None] if direction == 0 else ramp[None, :]
    canvas += grad[..., None] * rng.uniform(5.0, 25.0)
    for _ in range(complexity):
        kind = ["disk", "rect", "ellipse", "tri_up", "ring"][int(rng.integers(5))]
        r = rng.uniform(0.05, 0.16) * size
        cy, cx = rng.uniform(0, size, size=2)
        mask = _shape_in_box(size, kind, cy - r, cx - r, cy + r, cx + r)
        color = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9))) * 255.0
        canvas[mask] = color
    canvas += rng.normal(0.0, 6.0 * max(jitter, 0.1), size=canvas.shape)
    return canvas


def render_instance(config: SynthConfig, cat_index: int, recipe, rng: np.random.Generator):
    """Render one object instance; returns (image uint8, [(tag, mask)])."""
    name, build, connected, separated = recipe
    size = config.image_size
    for _ in range(40):
        cy = rng.uniform(0.4, 0.6) * size
        cx = rng.uniform(0.4, 0.6) * size
        s = rng.uniform(0.26, 0.36) * size
        parts = build(rng, size, cy, cx, s)
        index_map = np.zeros((size, size), dtype=np.int32)
        for i, (_, mask) in enumerate(parts):
            index_map[mask] = i + 1
        masks = [(tag, (index_map == i + 1).astype(np.uint8)) for i, (tag, _) in enumerate(parts)]
        if any(int(m.sum()) < 12 for _, m in masks):
            continue
        if any(not parts_connected(masks[i][1], masks[j][1]) for i, j in connected):
            continue
        if any(parts_connected(masks[i][1], masks[j][1]) for i, j in separated):
            continue
        canvas = _render_background(rng, size, config.background_complexity, config.color_jitter)
        for i, (tag, m) in enumerate(masks):
            color = _part_color(cat_index, i, rng, config.color_jitter)
            canvas[m.astype(bool)] = color
        canvas += rng.normal(0.0, 4.0 * max(config.color_jitter, 0.1), size=canvas.shape)
        image = np.clip(canvas, 0, 255).astype(np.uint8)
        return image, masks
    raise RuntimeError(f"could not render a valid {name!r} instance after 40 attempts")


def build_categories(config: SynthConfig) -> list[tuple[str, int, tuple]]:
    """Select (category name, base recipe index, recipe) honoring the
    configured part-count range; clones get distinct palettes."""
    table = [r for r in _recipe_table() if config.min_parts <= _recipe_parts(r) <= config.max_parts]
    if not table:
        raise ValueError("no recipe matches the configured part-count range")
    out = []
    for i in range(config.n_categories):
        name, build, connected, separated = table[i % len(table)]
        suffix = "" if i < len(table) else str(i // len(table) + 1)
        out.append((name + suffix, i, (name, build, connected, separated)))
    return out


def _recipe_parts(recipe) -> int:
    _, _, connected, separated = recipe
    indices = [i for pair in connected + separated for i in pair]
    return max(indices) + 1 if indices else 1


def generate_objects(config: SynthConfig) -> dict[str, list[PartObject]]:
    """Generate all splits in memory; deterministic in config.seed."""
    categories = build_categories(config)
    split_sizes = [("train", config.instances_per_category), ("val", config.val_instances), ("test", config.test_instances)]
    splits: dict[str, list[PartObject]] = {name: [] for name, n in split_sizes if n > 0}
    for cat_pos, (cat_name, cat_index, recipe) in enumerate(categories):
        offset = 0
        for split_name, count in split_sizes:
            if count <= 0:
                continue
            for k in range(count):
                seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(cat_pos, offset + k))
                rng = np.random.default_rng(seq)
                image, masks = render_instance(config, cat_index, recipe, rng)
                object_id = f"{cat_name}_{offset + k:03d}"
                splits[split_name].append(PartObject(object_id, cat_name, image, masks))
            offset += count
    return splits


def generate_synthetic(config: SynthConfig, root) -> dict[str, DatasetManifest]:
    """Materialize the synthetic dataset on disk in the standard layout."""
    root = Path(root)
    manifests = {}
    for split, objects in generate_objects(config).items():
        manifests[split] = export_tda(objects, root, split)
    return manifests
