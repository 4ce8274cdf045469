"""Reference-guided click-based interactive segmentation toolkit."""

from .clicks import Click, DISK_RADIUS, NEGATIVE, POSITIVE
from .model import ModelConfig, SegModel, load_checkpoint, predict, save_checkpoint
from .prompts import ReferenceGuidance, generate_prompts
from .robot import EvalConfig, NoCReport, SegPredictor, evaluate, run_session
from .sampling import EvalSample, PartObject, TrainingPair, build_eval_samples
from .training import TrainConfig, normalized_focal_loss, train

__version__ = "0.1.0"

__all__ = [
    "Click",
    "DISK_RADIUS",
    "EvalConfig",
    "EvalSample",
    "ModelConfig",
    "NEGATIVE",
    "NoCReport",
    "PartObject",
    "POSITIVE",
    "ReferenceGuidance",
    "SegModel",
    "SegPredictor",
    "TrainConfig",
    "TrainingPair",
    "build_eval_samples",
    "evaluate",
    "generate_prompts",
    "load_checkpoint",
    "normalized_focal_loss",
    "predict",
    "run_session",
    "save_checkpoint",
    "train",
]
