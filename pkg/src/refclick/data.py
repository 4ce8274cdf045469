"""On-disk dataset layout for part-annotated corpora, loader, and exporter.

Layout, versioned with ``format_version``:

    root/{split}/{category}/{object_id}/
        image.png    RGB image
        parts.png    single indexed-palette image; index i+1 = i-th tag
        parts.json   {"format_version": 1, "tags": [ordered tag names]}

Storing all parts in one indexed image makes part masks structurally
disjoint. Object iteration is plain codepoint ordering of the id strings,
with no locale dependence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .sampling import PartObject

FORMAT_VERSION = 1

log = logging.getLogger(__name__)

# Fixed palette so parts.png files are viewable and byte-stable.
_PALETTE_BASE = [
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
]


def _palette() -> list[int]:
    flat: list[int] = []
    for i in range(256):
        r, g, b = _PALETTE_BASE[i % len(_PALETTE_BASE)] if i < len(_PALETTE_BASE) else ((i * 37) % 256, (i * 91) % 256, (i * 151) % 256)
        flat.extend((r, g, b))
    return flat


@dataclass
class ManifestEntry:
    object_id: str
    category: str
    directory: Path
    tags: list[str]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[ManifestEntry]


def _load_parts_json(path: Path) -> list[str]:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict) or "tags" not in payload:
        raise ValueError(f"{path}: expected an object with a 'tags' list")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {version!r}")
    tags = payload["tags"]
    if not isinstance(tags, list) or not tags or not all(isinstance(t, str) for t in tags):
        raise ValueError(f"{path}: 'tags' must be a nonempty list of strings")
    return tags


def scan_manifest(root, split: str) -> DatasetManifest:
    """Walk the layout without decoding images."""
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"split directory not found: {split_dir}")
    entries: list[ManifestEntry] = []
    seen_ids: set[str] = set()
    for cat_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        for obj_dir in sorted(p for p in cat_dir.iterdir() if p.is_dir()):
            for name in ("image.png", "parts.png", "parts.json"):
                if not (obj_dir / name).is_file():
                    raise FileNotFoundError(f"{obj_dir}: missing {name}")
            tags = _load_parts_json(obj_dir / "parts.json")
            object_id = obj_dir.name
            if object_id in seen_ids:
                raise ValueError(f"duplicate object id {object_id!r} under {split_dir}")
            seen_ids.add(object_id)
            entries.append(ManifestEntry(object_id, cat_dir.name, obj_dir, tags))
    entries.sort(key=lambda e: e.object_id)
    return DatasetManifest(root=root, split=split, entries=entries)


def load_part_dataset(root, split: str) -> list[PartObject]:
    """Load and validate every object of a split.

    Errors name the offending entry: size mismatches, part indices without
    a tag, empty part masks, and per-category tag-order drift all fail the
    load.
    """
    manifest = scan_manifest(root, split)
    category_tags: dict[str, tuple[str, list[str]]] = {}
    objects: list[PartObject] = []
    for entry in manifest.entries:
        image = np.asarray(Image.open(entry.directory / "image.png").convert("RGB"))
        index_map = np.asarray(Image.open(entry.directory / "parts.png"))
        if index_map.ndim != 2:
            raise ValueError(f"{entry.directory}/parts.png: expected a single-channel indexed image")
        if index_map.shape != image.shape[:2]:
            raise ValueError(
                f"{entry.object_id}: parts.png shape {index_map.shape} does not match image {image.shape[:2]}"
            )
        max_index = int(index_map.max()) if index_map.size else 0
        if max_index > len(entry.tags):
            raise ValueError(
                f"{entry.object_id}: parts.png uses index {max_index} but only {len(entry.tags)} tags are declared"
            )
        if entry.category in category_tags:
            first_id, first_tags = category_tags[entry.category]
            if first_tags != entry.tags:
                raise ValueError(
                    f"{entry.object_id}: tag order {entry.tags} differs from {first_id}'s {first_tags} "
                    f"within category {entry.category!r}"
                )
        else:
            category_tags[entry.category] = (entry.object_id, entry.tags)
        parts = []
        for i, tag in enumerate(entry.tags):
            mask = (index_map == i + 1).astype(np.uint8)
            if not mask.any():
                raise ValueError(f"{entry.object_id}: part {tag!r} has an empty mask")
            parts.append((tag, mask))
        objects.append(PartObject(entry.object_id, entry.category, image, parts))
    return objects


def masks_to_index_map(parts: Sequence[tuple[str, np.ndarray]], object_id: str = "") -> np.ndarray:
    """Collapse per-part masks into one index map (index i+1 = i-th part).

    Contested pixels (possible in converted external data) go to the
    lexicographically-first tag; the conflict count is logged, not fatal.
    """
    shape = np.asarray(parts[0][1]).shape
    index_map = np.zeros(shape, dtype=np.uint8)
    order = sorted(range(len(parts)), key=lambda i: parts[i][0], reverse=True)
    conflicts = 0
    claimed = np.zeros(shape, dtype=bool)
    for i in order:  # lexicographically-first tag written last, so it wins contested pixels
        mask = np.asarray(parts[i][1]).astype(bool)
        conflicts += int(np.logical_and(claimed, mask).sum())
        index_map[mask] = i + 1
        claimed |= mask
    if conflicts:
        log.warning("%s: %d contested part pixels resolved to the lexicographically-first tag", object_id, conflicts)
    return index_map


def export_tda(objects: Sequence[PartObject], root, split: str) -> DatasetManifest:
    """Write objects into the on-disk layout; loading it back reproduces
    the masks bit-exactly."""
    root = Path(root)
    entries: list[ManifestEntry] = []
    for obj in objects:
        obj_dir = root / split / obj.category / obj.object_id
        obj_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(obj.image, dtype=np.uint8)).save(obj_dir / "image.png")
        index_map = masks_to_index_map(obj.parts, obj.object_id)
        parts_img = Image.fromarray(index_map, mode="P")
        parts_img.putpalette(_palette())
        parts_img.save(obj_dir / "parts.png")
        with open(obj_dir / "parts.json", "w") as fh:
            json.dump({"format_version": FORMAT_VERSION, "tags": obj.tags}, fh)
        entries.append(ManifestEntry(obj.object_id, obj.category, obj_dir, obj.tags))
    entries.sort(key=lambda e: e.object_id)
    return DatasetManifest(root=root, split=split, entries=entries)


def convert_coco_parts(annotation_json, images_root, out_root, split: str = "train"):
    """Converter for COCO-style part annotations (interface stub).

    Mapping: each COCO image with part annotations becomes one object
    directory; the annotation ``category_id`` names the object category;
    per-part segmentations are rasterized, overlaps resolved by
    :func:`masks_to_index_map`, and part names become the ordered tag
    list (one canonical order per category, from the category metadata).

    Implementation is intentionally left out; the on-disk layout above is
    the contract third-party converters should target.
    """
    raise NotImplementedError("COCO part conversion is documented but not implemented")
