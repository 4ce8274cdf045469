"""Pair data sampling: random part-subset targets with matched references
for training, and the deterministic combination enumeration with
lexicographic reference selection for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import maskops
from .prompts import ReferenceGuidance


@dataclass
class PartObject:
    """An annotated instance: ordered (part tag, mask) pairs on one image.

    ``object_id`` doubles as the lexicographic sort key that the
    evaluation reference rule depends on, so ids must be unique.
    """

    object_id: str
    category: str
    image: np.ndarray
    parts: list[tuple[str, np.ndarray]]

    def __post_init__(self):
        if not self.parts:
            raise ValueError(f"{self.object_id}: an object needs at least one part")
        tags = [t for t, _ in self.parts]
        if len(set(tags)) != len(tags):
            raise ValueError(f"{self.object_id}: duplicate part tags {tags}")
        shape = np.asarray(self.image).shape[:2]
        for tag, mask in self.parts:
            if maskops.as_bitmask(mask).shape != shape:
                raise ValueError(f"{self.object_id}/{tag}: mask shape does not match image {shape}")

    @property
    def tags(self) -> list[str]:
        return [t for t, _ in self.parts]

    def union_mask(self, tags: Sequence[str]) -> np.ndarray:
        """Union of the masks for the given part tags."""
        by_tag = dict(self.parts)
        missing = [t for t in tags if t not in by_tag]
        if missing:
            raise KeyError(f"{self.object_id}: unknown part tags {missing}")
        out = np.zeros(np.asarray(self.image).shape[:2], dtype=np.uint8)
        for t in tags:
            out |= by_tag[t]
        return out


@dataclass
class TrainingPair:
    target_image: np.ndarray
    target_gt: np.ndarray
    guidance: ReferenceGuidance
    selected_tags: frozenset[str]
    target_id: str = ""
    reference_id: str = ""


@dataclass
class EvalSample:
    target_image: np.ndarray
    target_gt: np.ndarray
    guidance: ReferenceGuidance
    combo: tuple[str, ...]
    kind: str  # single | pair | whole
    target_id: str = ""
    reference_id: str = ""


def reference_dropout(guidance: ReferenceGuidance, rng: np.random.Generator, p: float = 0.25) -> ReferenceGuidance:
    """With probability ``p`` keep exactly one mask (positive-only or
    negative-only with equal odds), otherwise keep both.

    Guidance that already misses a mask passes through unchanged.
    """
    if guidance.pos_mask is None or guidance.neg_mask is None:
        return guidance
    if rng.random() >= p:
        return guidance
    if rng.random() < 0.5:
        return ReferenceGuidance(guidance.ref_image, guidance.pos_mask, None)
    return ReferenceGuidance(guidance.ref_image, None, guidance.neg_mask)


def _guidance_for_tags(reference: PartObject, tags: Sequence[str]) -> ReferenceGuidance:
    """Positive mask from the selected tags, negative from the remainder."""
    pos = reference.union_mask(tags)
    remaining = [t for t in reference.tags if t not in set(tags)]
    neg = reference.union_mask(remaining) if remaining else None
    return ReferenceGuidance(reference.image, pos, neg)


def sample_training_pair(
    dataset: Sequence[PartObject],
    rng: np.random.Generator,
    ref_dropout_p: float = 0.0,
) -> TrainingPair:
    """Draw one (target, reference) pair.

    Picks an object uniformly, selects k ~ Uniform{1..N} of its parts for
    the ground truth, and takes a different same-category object as the
    reference. Categories with a single object are reselected; a dataset
    where no category has two objects is an error.
    """
    by_category: dict[str, list[PartObject]] = {}
    for obj in dataset:
        by_category.setdefault(obj.category, []).append(obj)
    if not any(len(objs) >= 2 for objs in by_category.values()):
        raise ValueError("training needs at least one category with two or more objects")

    while True:
        target = dataset[int(rng.integers(len(dataset)))]
        peers = [o for o in by_category[target.category] if o.object_id != target.object_id]
        if peers:
            break

    n = len(target.parts)
    k = int(rng.integers(1, n + 1))
    idx = rng.choice(n, size=k, replace=False)
    tags = [target.tags[i] for i in sorted(idx)]

    reference = peers[int(rng.integers(len(peers)))]
    guidance = _guidance_for_tags(reference, tags)
    if ref_dropout_p > 0.0:
        guidance = reference_dropout(guidance, rng, ref_dropout_p)
    return TrainingPair(
        target_image=target.image,
        target_gt=target.union_mask(tags),
        guidance=guidance,
        selected_tags=frozenset(tags),
        target_id=target.object_id,
        reference_id=reference.object_id,
    )


def parts_connected(a: np.ndarray, b: np.ndarray) -> bool:
    """True iff the union of the two masks is a single 8-connected region."""
    a = maskops.as_bitmask(a)
    b = maskops.as_bitmask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = a | b
    if not union.any():
        return False
    return maskops.connected_components(union, connectivity=8).count == 1


def _combinations_with_kinds(obj: PartObject) -> list[tuple[tuple[str, ...], str]]:
    """Singles in part order, connected pairs in index order, then the whole.

    A single-part object emits its one subset once, as the whole; a
    two-part connected object emits {both} twice, once as a pair and once
    as the whole, matching the combination-count rule N + pairs + [N > 1].
    """
    tags = obj.tags
    n = len(tags)
    if n == 1:
        return [((tags[0],), "whole")]
    combos: list[tuple[tuple[str, ...], str]] = [((t,), "single") for t in tags]
    for i in range(n):
        for j in range(i + 1, n):
            if parts_connected(obj.parts[i][1], obj.parts[j][1]):
                combos.append(((tags[i], tags[j]), "pair"))
    combos.append((tuple(tags), "whole"))
    return combos


def enumerate_eval_combinations(obj: PartObject) -> list[tuple[str, ...]]:
    """Deterministic part-subset list for combination evaluation."""
    return [combo for combo, _ in _combinations_with_kinds(obj)]


def select_reference(eval_set: Sequence[PartObject], current: PartObject) -> PartObject:
    """Same-category successor of ``current`` in object-id order.

    The id order wraps cyclically at the end of the category; a category
    with a single object cannot be evaluated and raises.
    """
    same = sorted((o for o in eval_set if o.category == current.category), key=lambda o: o.object_id)
    if not any(o.object_id == current.object_id for o in same):
        raise ValueError(f"{current.object_id} is not part of the evaluation set")
    if len(same) < 2:
        raise ValueError(f"category {current.category!r} has a single object; no reference available")
    after = [o for o in same if o.object_id > current.object_id]
    return after[0] if after else same[0]


def build_eval_samples(eval_set: Sequence[PartObject]) -> list[EvalSample]:
    """Expand an evaluation set into deterministic combination samples.

    Objects whose category has no second instance are excluded (no
    reference exists for them).
    """
    counts: dict[str, int] = {}
    for obj in eval_set:
        counts[obj.category] = counts.get(obj.category, 0) + 1
    samples: list[EvalSample] = []
    for obj in sorted(eval_set, key=lambda o: o.object_id):
        if counts[obj.category] < 2:
            continue
        reference = select_reference(eval_set, obj)
        for combo, kind in _combinations_with_kinds(obj):
            samples.append(
                EvalSample(
                    target_image=obj.image,
                    target_gt=obj.union_mask(combo),
                    guidance=_guidance_for_tags(reference, combo),
                    combo=combo,
                    kind=kind,
                    target_id=obj.object_id,
                    reference_id=reference.object_id,
                )
            )
    return samples


def export_manifest(samples: Sequence[EvalSample], path) -> None:
    """Archive the exact benchmark set as JSON lines for auditing/diffing."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "target_id": s.target_id,
                        "combo": list(s.combo),
                        "reference_id": s.reference_id,
                        "kind": s.kind,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
