"""Reference branch: turn a reference image plus guidance masks into the
positive/negative prompt vectors added to the target branch's tokens.

The reference image runs through the shared embedding and backbone, a
masked average over the downsampled guidance mask pools the feature grid
into one vector per polarity, and a polarity-specific two-layer MLP
encodes each vector into its prompt.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import maskops
from .clicks import NEGATIVE, POSITIVE


@dataclass
class ReferenceGuidance:
    """Reference image with optional positive and negative masks.

    The negative mask marks content to suppress; either mask (or both)
    may be absent. ``None`` and an all-zero mask are equivalent.
    """

    ref_image: np.ndarray
    pos_mask: Optional[np.ndarray] = None
    neg_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        img = np.asarray(self.ref_image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"reference image must be HxWx3, got shape {img.shape}")
        for name, mask in (("pos_mask", self.pos_mask), ("neg_mask", self.neg_mask)):
            if mask is None:
                continue
            m = maskops.as_bitmask(mask)
            if m.shape != img.shape[:2]:
                raise ValueError(f"{name} shape {m.shape} does not match reference image {img.shape[:2]}")

    def mask_for(self, polarity: str) -> Optional[np.ndarray]:
        return self.pos_mask if polarity == POSITIVE else self.neg_mask


def extract_reference_feature(model, ref_image: np.ndarray) -> torch.Tensor:
    """Shared-backbone feature grid (H', W', C) of the reference image.

    The reference branch omits the extra-map embedding entirely; the
    post-norm tokens are reshaped into a spatial grid. Gradients flow when
    the caller runs under grad; inference callers should wrap in no_grad.
    """
    from .model import image_to_tensor

    dtype = next(model.parameters()).dtype
    tokens = model.embed_image(image_to_tensor(ref_image, dtype))
    tokens = model.encoder_norm(model.backbone(tokens))
    g = model.config.grid_size
    return tokens.reshape(g, g, model.config.embed_dim)


def masked_representation(feature: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted channel average of a feature grid.

    Computes sum(f * m) / sum(m) per channel; an all-zero mask yields the
    zero vector (the defined convention for absent guidance).
    """
    if feature.dim() != 3:
        raise ValueError(f"feature must be (H', W', C), got shape {tuple(feature.shape)}")
    if mask.shape != feature.shape[:2]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match feature grid {tuple(feature.shape[:2])}")
    mask = mask.to(feature.dtype)
    total = mask.sum()
    if total.item() == 0.0:
        return torch.zeros(feature.shape[-1], dtype=feature.dtype)
    return (feature * mask.unsqueeze(-1)).sum(dim=(0, 1)) / total


def encode_prompt(model, representation: torch.Tensor, polarity: str) -> torch.Tensor:
    """Run a pooled representation through the matching polarity MLP."""
    if representation.shape[-1] != model.config.embed_dim:
        raise ValueError(f"representation length {representation.shape[-1]} != embed dim {model.config.embed_dim}")
    mlp = model.prompt_mlp_pos if polarity == POSITIVE else model.prompt_mlp_neg
    return mlp(representation)


def generate_prompts(
    model,
    guidance: ReferenceGuidance,
    feature: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Full reference branch: (positive prompt, negative prompt), each (C,).

    An absent or empty mask maps to the zero vector without touching the
    MLP, so empty guidance is indistinguishable from no guidance. Pass a
    precomputed ``feature`` to reuse a cached reference-feature grid.
    """
    dtype = next(model.parameters()).dtype
    out = []
    for polarity in (POSITIVE, NEGATIVE):
        mask = guidance.mask_for(polarity)
        if mask is None or not np.asarray(mask).any():
            out.append(torch.zeros(model.config.embed_dim, dtype=dtype))
            continue
        if feature is None:
            feature = extract_reference_feature(model, guidance.ref_image)
        down = maskops.downsample_area(maskops.as_bitmask(mask), model.config.patch_size)
        rep = masked_representation(feature, torch.from_numpy(down).to(dtype))
        out.append(encode_prompt(model, rep, polarity))
    return out[0], out[1]


class ReferenceFeatureCache:
    """Reference-feature memo keyed by image content.

    The reference branch is click-independent, so a session needs the
    backbone pass over its reference image exactly once. Safe for
    concurrent readers; insertion happens under a lock. Only valid while
    the owning model's weights are frozen.
    """

    def __init__(self, max_entries: int = 64):
        self.max_entries = max_entries
        self._lock = threading.Lock()
        self._entries: dict[str, torch.Tensor] = {}

    @staticmethod
    def key_for(ref_image: np.ndarray) -> str:
        img = np.ascontiguousarray(ref_image)
        return hashlib.sha256(img.tobytes() + str(img.shape).encode()).hexdigest()

    def get_or_compute(self, model, ref_image: np.ndarray) -> torch.Tensor:
        key = self.key_for(ref_image)
        with self._lock:
            hit = self._entries.get(key)
        if hit is not None:
            return hit
        with torch.no_grad():
            feature = extract_reference_feature(model, ref_image)
        with self._lock:
            if len(self._entries) >= self.max_entries:
                self._entries.pop(next(iter(self._entries)))
            self._entries[key] = feature
        return feature
