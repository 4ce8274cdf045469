"""Training loop: normalized focal loss, iterative click simulation,
reference-mask dropout, step-decay Adam schedule, checkpointing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import maskops
from .clicks import DISK_RADIUS, Click, assemble_extra_maps
from .model import ModelConfig, SegModel, image_to_tensor, save_checkpoint
from .prompts import ReferenceGuidance, masked_representation
from .robot import first_click, next_click
from .sampling import PartObject, TrainingPair, reference_dropout, sample_training_pair

__all__ = [
    "AugmentConfig",
    "TrainConfig",
    "normalized_focal_loss",
    "reference_dropout",
    "simulate_training_clicks",
    "train",
]


@dataclass
class AugmentConfig:
    enabled: bool = True
    hflip: bool = True
    scale_range: tuple[float, float] = (0.75, 1.4)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 20
    steps_per_epoch: int = 500
    batch_size: int = 8
    learning_rate: float = 3e-4
    lr_decay_factor: float = 10.0
    lr_decay_epoch: int = 16
    focal_gamma: float = 2.0
    ref_dropout_p: float = 0.25
    max_sim_clicks: int = 3
    click_radius: int = DISK_RADIUS
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 5  # epochs

    def __post_init__(self):
        if not (0.0 <= self.ref_dropout_p <= 1.0):
            raise ValueError("ref_dropout_p must lie in [0, 1]")
        if self.lr_decay_epoch > self.epochs:
            raise ValueError("lr_decay_epoch must not exceed epochs")


def normalized_focal_loss(pred: torch.Tensor, gt: torch.Tensor, gamma: float = 2.0, eps: float = 1e-6) -> torch.Tensor:
    """Focal loss normalized by the total focal weight of each map.

    Per pixel the term is (1 - p_t)^gamma * (-log p_t); dividing by the
    map's summed weights (1 - p_t)^gamma makes the magnitude invariant to
    the fraction of easy pixels. gamma = 0 reduces to mean BCE.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() == 2:
        pred = pred.unsqueeze(0)
        gt = gt.unsqueeze(0)
    pred = pred.reshape(pred.shape[0], -1).clamp(eps, 1.0 - eps)
    gt = gt.reshape(gt.shape[0], -1).to(pred.dtype)
    p_t = torch.where(gt > 0.5, pred, 1.0 - pred)
    weight = (1.0 - p_t) ** gamma
    per_map = (weight * (-torch.log(p_t))).sum(dim=1) / weight.sum(dim=1).clamp_min(eps)
    return per_map.mean()


def simulate_training_clicks(
    gt: np.ndarray,
    predict_fn: Callable[[Sequence[Click], np.ndarray], np.ndarray],
    rng: np.random.Generator,
    max_k: int,
) -> tuple[list[Click], np.ndarray]:
    """Roll out k ~ Uniform{1..max_k} robot clicks against intermediate
    predictions; returns the clicks and the prediction preceding the last
    click (all zeros when k = 1). No gradients flow through the rollout.
    """
    gt = maskops.as_bitmask(gt)
    k = int(rng.integers(1, max_k + 1))
    clicks = [first_click(gt)]
    prev = np.zeros(gt.shape, dtype=np.float32)
    for _ in range(k - 1):
        pred = predict_fn(clicks, prev)
        error = maskops.threshold(pred) ^ gt
        if not error.any():
            break
        clicks.append(next_click(pred, gt, clicks))
        prev = pred
    return clicks, prev


# -- augmentation ------------------------------------------------------------


def _resize(arr: np.ndarray, size: tuple[int, int], nearest: bool) -> np.ndarray:
    img = Image.fromarray(arr)
    resample = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(img.resize((size[1], size[0]), resample))


def augment_sample(
    image: np.ndarray,
    masks: Sequence[Optional[np.ndarray]],
    rng: np.random.Generator,
    out_size: int,
    config: AugmentConfig,
) -> tuple[np.ndarray, list[Optional[np.ndarray]]]:
    """Random flip + scale + crop, keeping the first present mask nonempty."""
    masks = list(masks)
    if config.hflip and rng.random() < 0.5:
        image = image[:, ::-1]
        masks = [m[:, ::-1] if m is not None else None for m in masks]
    scale = rng.uniform(*config.scale_range)
    h, w = image.shape[:2]
    nh, nw = max(8, int(round(h * scale))), max(8, int(round(w * scale)))
    image = _resize(np.ascontiguousarray(image), (nh, nw), nearest=False)
    masks = [_resize(np.ascontiguousarray(m), (nh, nw), nearest=True) if m is not None else None for m in masks]

    anchor = next((m for m in masks if m is not None and m.any()), None)
    if nh < out_size or nw < out_size:
        pt, pl = max(0, (out_size - nh) // 2), max(0, (out_size - nw) // 2)
        pb, pr = max(0, out_size - nh - pt), max(0, out_size - nw - pl)
        image = np.pad(image, ((pt, pb), (pl, pr), (0, 0)), mode="edge")
        masks = [np.pad(m, ((pt, pb), (pl, pr))) if m is not None else None for m in masks]
        nh, nw = image.shape[:2]
        anchor = next((m for m in masks if m is not None and m.any()), None)

    def pick(limit: int, lo: int, hi: int) -> int:
        lo, hi = max(0, lo), min(limit, hi)
        if hi < lo:
            lo, hi = 0, limit
        return int(rng.integers(lo, hi + 1))

    if anchor is not None and anchor.any():
        rows = np.flatnonzero(anchor.any(axis=1))
        cols = np.flatnonzero(anchor.any(axis=0))
        r0 = pick(nh - out_size, rows[0] - out_size + 1, rows[-1])
        c0 = pick(nw - out_size, cols[0] - out_size + 1, cols[-1])
    else:
        r0 = int(rng.integers(0, nh - out_size + 1))
        c0 = int(rng.integers(0, nw - out_size + 1))
    image = image[r0 : r0 + out_size, c0 : c0 + out_size]
    masks = [m[r0 : r0 + out_size, c0 : c0 + out_size] if m is not None else None for m in masks]
    return np.ascontiguousarray(image), [np.ascontiguousarray(m) if m is not None else None for m in masks]


def _augment_pair(pair: TrainingPair, rng: np.random.Generator, out_size: int, config: AugmentConfig) -> TrainingPair:
    image, (gt,) = augment_sample(pair.target_image, [pair.target_gt], rng, out_size, config)
    g = pair.guidance
    ref_image, (pos, neg) = augment_sample(g.ref_image, [g.pos_mask, g.neg_mask], rng, out_size, config)
    return TrainingPair(
        target_image=image,
        target_gt=gt,
        guidance=ReferenceGuidance(ref_image, pos, neg),
        selected_tags=pair.selected_tags,
        target_id=pair.target_id,
        reference_id=pair.reference_id,
    )


# -- batched forward helpers -------------------------------------------------


def batch_prompts(model: SegModel, guidances: Sequence[ReferenceGuidance]) -> tuple[torch.Tensor, torch.Tensor]:
    """Reference branch for a whole batch, with gradients.

    Equivalent to per-sample prompt generation: absent or empty masks map
    to zero rows that bypass the MLP output entirely.
    """
    dtype = next(model.parameters()).dtype
    b = len(guidances)
    c = model.config.embed_dim
    imgs = torch.cat([image_to_tensor(g.ref_image, dtype) for g in guidances])
    tokens = model.encoder_norm(model.backbone(model.embed_image(imgs)))
    g_sz = model.config.grid_size
    grids = tokens.reshape(b, g_sz, g_sz, c)

    prompts = []
    for attr, mlp in (("pos_mask", model.prompt_mlp_pos), ("neg_mask", model.prompt_mlp_neg)):
        rows = []
        present = torch.zeros(b, 1, dtype=dtype)
        for i, g in enumerate(guidances):
            mask = getattr(g, attr)
            if mask is None or not np.asarray(mask).any():
                rows.append(torch.zeros(c, dtype=dtype))
                continue
            down = maskops.downsample_area(maskops.as_bitmask(mask), model.config.patch_size)
            rows.append(masked_representation(grids[i], torch.from_numpy(down).to(dtype)))
            present[i] = 1.0
        prompts.append(mlp(torch.stack(rows)) * present)
    return prompts[0], prompts[1]


def _batch_predict(
    model: SegModel,
    images_t: torch.Tensor,
    pairs: Sequence[TrainingPair],
    clicks: Sequence[Sequence[Click]],
    prevs: Sequence[np.ndarray],
    prompts: tuple[torch.Tensor, torch.Tensor],
    radius: int,
) -> torch.Tensor:
    dtype = images_t.dtype
    extras = np.stack([assemble_extra_maps(cl, pv, radius) for cl, pv in zip(clicks, prevs)])
    extras_t = torch.from_numpy(extras).to(dtype)
    return model(images_t, extras_t, prompts[0], prompts[1])


def train(
    dataset: Sequence[PartObject],
    config: TrainConfig,
    out_dir,
    model: Optional[SegModel] = None,
    pair_source: Optional[Callable[[np.random.Generator], TrainingPair]] = None,
    eval_hook: Optional[Callable[[SegModel, int], dict]] = None,
) -> Path:
    """Optimize the full model (shared backbone, embeddings, decoder, both
    prompt MLPs) and return the final checkpoint path.

    ``pair_source`` overrides the default dataset sampler (used for
    overfit smoke testing); metrics stream to ``out_dir/metrics.jsonl``.
    A non-finite loss aborts with a diagnostic checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = SegModel(config.model)
    model.train()
    dtype = next(model.parameters()).dtype

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=[config.lr_decay_epoch * config.steps_per_epoch], gamma=1.0 / config.lr_decay_factor
    )

    def draw_pair() -> TrainingPair:
        if pair_source is not None:
            return pair_source(rng)
        pair = sample_training_pair(dataset, rng, ref_dropout_p=config.ref_dropout_p)
        if config.augment.enabled:
            pair = _augment_pair(pair, rng, config.model.input_size, config.augment)
        return pair

    metrics_path = out_dir / "metrics.jsonl"
    step = 0
    first_loss = None
    last_loss = None
    with open(metrics_path, "w") as metrics:
        for epoch in range(1, config.epochs + 1):
            for _ in range(config.steps_per_epoch):
                step += 1
                pairs = [draw_pair() for _ in range(config.batch_size)]
                images_t = torch.cat([image_to_tensor(p.target_image, dtype) for p in pairs])
                prompts = batch_prompts(model, [p.guidance for p in pairs])

                # Roll out robot clicks against intermediate predictions;
                # clicks are data, no gradient flows through the rollouts.
                ks = rng.integers(1, config.max_sim_clicks + 1, size=len(pairs))
                clicks = [[first_click(p.target_gt)] for p in pairs]
                prevs = [np.zeros_like(p.target_gt, dtype=np.float32) for p in pairs]
                with torch.no_grad():
                    for rollout_round in range(1, int(ks.max())):
                        active = [i for i in range(len(pairs)) if ks[i] > rollout_round]
                        if not active:
                            break
                        preds = _batch_predict(
                            model,
                            images_t[active],
                            [pairs[i] for i in active],
                            [clicks[i] for i in active],
                            [prevs[i] for i in active],
                            (prompts[0][active].detach(), prompts[1][active].detach()),
                            config.click_radius,
                        )
                        for row, i in enumerate(active):
                            pred = preds[row, 0].numpy().astype(np.float32)
                            gt = maskops.as_bitmask(pairs[i].target_gt)
                            if not (maskops.threshold(pred) ^ gt).any():
                                ks[i] = rollout_round  # already perfect, stop clicking
                                continue
                            clicks[i].append(next_click(pred, gt, clicks[i]))
                            prevs[i] = pred

                probs = _batch_predict(model, images_t, pairs, clicks, prevs, prompts, config.click_radius)
                gts = torch.from_numpy(np.stack([p.target_gt for p in pairs])).unsqueeze(1)
                loss = normalized_focal_loss(probs, gts.to(dtype), config.focal_gamma)

                if not math.isfinite(loss.item()):
                    save_checkpoint(model, out_dir / "checkpoint_diagnostic.pt", {"step": step, "loss": str(loss.item())})
                    raise RuntimeError(f"non-finite loss at step {step}; diagnostic checkpoint written")

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()

                last_loss = float(loss.item())
                if first_loss is None:
                    first_loss = last_loss
                metrics.write(
                    json.dumps({"step": step, "epoch": epoch, "loss": last_loss, "lr": optimizer.param_groups[0]["lr"]})
                    + "\n"
                )
            if eval_hook is not None:
                record = {"epoch": epoch, "step": step}
                model.eval()
                with torch.no_grad():
                    record.update(eval_hook(model, epoch))
                model.train()
                metrics.write(json.dumps(record) + "\n")
                metrics.flush()
            if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch < config.epochs:
                save_checkpoint(model, out_dir / f"checkpoint_epoch{epoch:03d}.pt", {"epoch": epoch, "step": step})

    final = out_dir / "checkpoint.pt"
    model.eval()
    save_checkpoint(model, final, {"epochs": config.epochs, "steps": step, "first_loss": first_loss, "last_loss": last_loss})
    return final
