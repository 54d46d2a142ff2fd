"""Optimization, evaluation and checkpointing."""
from .checkpoint import MAGIC, VERSION, Checkpoint, load_checkpoint, save_checkpoint
from .loop import METRICS_COLUMNS, EpochRecord, Trainer, TrainResult, evaluate, train, write_metrics
from .optim import (
    OptimizerState,
    TrainConfig,
    accuracy_from_logits,
    adamw_step,
    clip_grad_norm,
    cross_entropy,
    decays,
    lr_at,
    warmup_cosine,
    warmup_steps,
)

__all__ = [
    "MAGIC", "METRICS_COLUMNS", "VERSION", "Checkpoint", "EpochRecord", "OptimizerState",
    "TrainConfig", "TrainResult", "Trainer", "accuracy_from_logits", "adamw_step",
    "clip_grad_norm", "cross_entropy", "decays", "evaluate", "load_checkpoint", "lr_at",
    "save_checkpoint", "train", "warmup_cosine", "warmup_steps", "write_metrics",
]
