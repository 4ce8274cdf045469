"""Simulated user and metric engine: center-first clicking, largest-error
follow-up clicks, per-click IoU traces, and NoC / IoU&1 aggregation.

Sessions are deterministic given fixed weights and samples; evaluation may
shard across workers and still merges in sample order, so reports are
byte-identical regardless of worker count.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import maskops, model as model_mod
from .clicks import DISK_RADIUS, NEGATIVE, POSITIVE, Click
from .prompts import ReferenceFeatureCache, ReferenceGuidance, generate_prompts
from .sampling import EvalSample

PRED_THRESHOLD = 0.5
ERROR_CONNECTIVITY = 4  # keeps FP/FN error regions single-polarity

CONVENTIONS = {
    "click_center": "exact euclidean distance transform, border as background, row-major ties",
    "error_connectivity": ERROR_CONNECTIVITY,
    "prediction_threshold": PRED_THRESHOLD,
    "max_clicks_failure_value": 20,
}


@dataclass
class SessionTrace:
    sample_id: str
    ious: list[float] = field(default_factory=list)
    clicks: list[Click] = field(default_factory=list)


@dataclass
class NoCReport:
    noc80: float
    noc85: float
    noc90: float
    iou_at_1: float  # percent
    failures_per_threshold: dict[str, int]
    n_samples: int
    traces: list[SessionTrace] = field(default_factory=list)

    def to_dict(self, include_traces: bool = True) -> dict:
        out = {
            "noc80": self.noc80,
            "noc85": self.noc85,
            "noc90": self.noc90,
            "iou_at_1": self.iou_at_1,
            "failures_per_threshold": self.failures_per_threshold,
            "n_samples": self.n_samples,
            "conventions": CONVENTIONS,
        }
        if include_traces:
            out["traces"] = [
                {
                    "sample_id": t.sample_id,
                    "ious": t.ious,
                    "clicks": [[c.row, c.col, c.polarity] for c in t.clicks],
                }
                for t in self.traces
            ]
        return out

    def to_json(self, include_traces: bool = True) -> str:
        return json.dumps(self.to_dict(include_traces), sort_keys=True)


def first_click(gt: np.ndarray) -> Click:
    """Positive click at the interior center of the target."""
    gt = maskops.as_bitmask(gt)
    if not gt.any():
        raise ValueError("first click needs a nonempty ground truth")
    row, col = maskops.interior_center(gt)
    return Click(row, col, POSITIVE, 1)


def next_click(pred: np.ndarray, gt: np.ndarray, prior: Sequence[Click]) -> Click:
    """Click at the interior center of the largest prediction-error region.

    Polarity follows the ground truth at the chosen pixel: positive in a
    false-negative region, negative in a false-positive one.
    """
    gt = maskops.as_bitmask(gt)
    pred_bin = maskops.threshold(pred, PRED_THRESHOLD)
    error = (pred_bin ^ gt).astype(np.uint8)
    if not error.any():
        raise ValueError("prediction is perfect; no further click is defined")
    region = maskops.largest_component(error, ERROR_CONNECTIVITY)
    row, col = maskops.interior_center(region)
    polarity = POSITIVE if gt[row, col] == 1 else NEGATIVE
    return Click(row, col, polarity, len(prior) + 1)


class SegPredictor:
    """Session adapter around a :class:`SegModel`.

    ``open_session`` resolves the reference prompts exactly once (the
    reference branch is click-independent) and returns a closure mapping
    (clicks, previous prediction) to the next probability map.
    """

    def __init__(self, model, radius: int = DISK_RADIUS, feature_cache: Optional[ReferenceFeatureCache] = None):
        self.model = model
        self.radius = radius
        self.feature_cache = feature_cache if feature_cache is not None else ReferenceFeatureCache()

    def open_session(self, image: np.ndarray, guidance: Optional[ReferenceGuidance]):
        prompts = None
        if guidance is not None:
            with torch.no_grad():
                feature = None
                if guidance.pos_mask is not None or guidance.neg_mask is not None:
                    feature = self.feature_cache.get_or_compute(self.model, guidance.ref_image)
                prompts = generate_prompts(self.model, guidance, feature)

        bound = prompts if prompts is not None else (None, None)

        def step(clicks: Sequence[Click], prev: np.ndarray) -> np.ndarray:
            return model_mod.predict(self.model, image, clicks, prev, prompts=bound, radius=self.radius)

        return step


def apply_regime(guidance: Optional[ReferenceGuidance], regime: str) -> Optional[ReferenceGuidance]:
    """Restrict guidance to an evaluation regime: none / pos / neg / both."""
    if regime == "both":
        return guidance
    if regime == "none" or guidance is None:
        return None
    if regime == "pos":
        return ReferenceGuidance(guidance.ref_image, guidance.pos_mask, None)
    if regime == "neg":
        return ReferenceGuidance(guidance.ref_image, None, guidance.neg_mask)
    raise ValueError(f"unknown evaluation regime {regime!r}")


def run_session(
    predictor,
    sample: EvalSample,
    max_clicks: int = 20,
    stop_iou: float = 0.90,
) -> SessionTrace:
    """Drive one interactive session until the IoU target or the click cap."""
    gt = maskops.as_bitmask(sample.target_gt)
    step = predictor.open_session(sample.target_image, sample.guidance)
    trace = SessionTrace(sample_id=f"{sample.target_id}:{'+'.join(sample.combo)}:{sample.kind}")
    prev = np.zeros(gt.shape, dtype=np.float32)
    trace.clicks.append(first_click(gt))
    for k in range(1, max_clicks + 1):
        pred = step(trace.clicks, prev)
        score = maskops.iou(maskops.threshold(pred, PRED_THRESHOLD), gt)
        trace.ious.append(score)
        if score >= stop_iou or k == max_clicks:
            break
        trace.clicks.append(next_click(pred, gt, trace.clicks))
        prev = pred
    return trace


def noc(traces: Sequence[SessionTrace], threshold: float, max_clicks: int = 20) -> float:
    """Mean clicks to reach the IoU threshold; failures count as the cap."""
    if not traces:
        raise ValueError("noc of an empty trace list is undefined")
    total = 0
    for t in traces:
        needed = max_clicks
        for i, v in enumerate(t.ious):
            if v >= threshold:
                needed = i + 1
                break
        total += needed
    return total / len(traces)


def count_failures(traces: Sequence[SessionTrace], threshold: float) -> int:
    return sum(1 for t in traces if not any(v >= threshold for v in t.ious))


@dataclass
class EvalConfig:
    max_clicks: int = 20
    stop_iou: float = 0.90
    regime: str = "both"
    workers: int = 1
    radius: int = DISK_RADIUS


def evaluate(model, samples: Sequence[EvalSample], config: EvalConfig = EvalConfig()) -> NoCReport:
    """Run every session and aggregate NoC@80/85/90 and IoU&1 (percent)."""
    if not samples:
        raise ValueError("evaluation needs at least one sample")
    predictor = model if hasattr(model, "open_session") else SegPredictor(model, radius=config.radius)

    prepared = [
        EvalSample(
            target_image=s.target_image,
            target_gt=s.target_gt,
            guidance=apply_regime(s.guidance, config.regime),
            combo=s.combo,
            kind=s.kind,
            target_id=s.target_id,
            reference_id=s.reference_id,
        )
        for s in samples
    ]

    def run(sample: EvalSample) -> SessionTrace:
        return run_session(predictor, sample, config.max_clicks, config.stop_iou)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            traces = list(pool.map(run, prepared))
    else:
        traces = [run(s) for s in prepared]

    return NoCReport(
        noc80=noc(traces, 0.80, config.max_clicks),
        noc85=noc(traces, 0.85, config.max_clicks),
        noc90=noc(traces, 0.90, config.max_clicks),
        iou_at_1=100.0 * sum(t.ious[0] for t in traces) / len(traces),
        failures_per_threshold={
            "0.80": count_failures(traces, 0.80),
            "0.85": count_failures(traces, 0.85),
            "0.90": count_failures(traces, 0.90),
        },
        n_samples=len(traces),
        traces=traces,
    )


def write_csv(report: NoCReport, path) -> None:
    """One-row CSV in the benchmark table layout: @80, @85, @90, &1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["@80", "@85", "@90", "&1"])
        writer.writerow([f"{report.noc80:.2f}", f"{report.noc85:.2f}", f"{report.noc90:.2f}", f"{report.iou_at_1:.2f}"])
