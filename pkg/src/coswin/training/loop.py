"""Training and evaluation loops."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from ..data import AugmentFlags, Dataset, batch_iter
from ..exceptions import ContractError, NonFiniteError, TrainingError
from ..model import CoSwinModel
from ..tensor import backward, make_rng, no_grad
from .checkpoint import save_checkpoint
from .optim import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    cross_entropy,
    lr_at,
)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "step", "lr", "train_loss", "test_acc", "wall_seconds")


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    train_loss: float
    test_acc: Optional[float]
    wall_seconds: float

    def row(self) -> List[str]:
        acc = "" if self.test_acc is None else repr(self.test_acc)
        return [str(self.epoch), str(self.step), repr(self.lr), repr(self.train_loss), acc,
                f"{self.wall_seconds:.3f}"]


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_acc: Optional[float] = None
    steps: int = 0
    optimizer: Optional[OptimizerState] = None


class Trainer:
    """Owns the optimizer state and the step counter for one model.

    ``step`` performs forward (train mode), loss, backward, clipping and an
    AdamW update at the scheduled learning rate. Drop-path masks come from
    the (seed, step) stream so runs replay exactly.
    """

    def __init__(self, model: CoSwinModel, cfg: TrainConfig, total_steps: int):
        self.model = model
        self.cfg = cfg.validate()
        self.total_steps = total_steps
        self.state = OptimizerState()
        self.step_count = 0
        self.params = list(model.named_parameters())
        self.last_lr = 0.0

    def step(self, images: np.ndarray, labels: np.ndarray) -> float:
        """One optimizer step; returns the batch loss. Parameters stay untouched on failure."""
        rng = make_rng(self.cfg.seed, "drop_path", self.step_count)
        self.model.zero_grad()
        try:
            logits = self.model(images, train=True, rng=rng)
            loss = cross_entropy(logits, labels)
        except NonFiniteError as exc:
            raise TrainingError(f"loss became nan at step {self.step_count}: {exc}") from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"loss became {value} at step {self.step_count}")
        grads = backward(loss)
        by_name = {name: grads[p] for name, p in self.params if p in grads}
        clip_grad_norm(by_name, self.cfg.grad_clip_norm)
        lr = lr_at(min(self.step_count + 1, self.total_steps), self.total_steps, self.cfg)
        if lr > 0:
            adamw_step(self.params, by_name, self.state, lr, self.cfg.weight_decay,
                       self.cfg.betas, self.cfg.eps)
        self.last_lr = lr
        self.step_count += 1
        return value


def evaluate(model: CoSwinModel, dataset: Dataset, batch_size: int = 256) -> Tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy in eval mode (no drop-path)."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    with no_grad():
        for images, labels in batch_iter(dataset, batch_size, seed=0, shuffle=False):
            logits = model(images, train=False)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            loss_sum += float(cross_entropy(logits, labels).data) * len(labels)
    return correct / len(dataset), loss_sum / len(dataset)


def _checkpoint_meta(cfg: TrainConfig, epoch: int, step: int, test_acc=None,
                     extra: Optional[dict] = None) -> dict:
    return {**(extra or {}), "train": cfg.to_dict(), "epoch": epoch, "step": step,
            "rng": {"seed": cfg.seed, "next_step": step, "next_epoch": epoch},
            "test_acc": test_acc}


def write_metrics(path, history: List[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for rec in history:
            writer.writerow(rec.row())


def train(model: CoSwinModel, dataset: Dataset, cfg: TrainConfig,
          test_set: Optional[Dataset] = None, out_dir=None,
          augment: Optional[AugmentFlags] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          extra_meta: Optional[dict] = None) -> TrainResult:
    """Train ``model`` in place and return the per-epoch history.

    With ``out_dir`` set, writes ``metrics.csv``, ``last.ckpt`` and
    ``best.ckpt`` (best test accuracy; the last epoch when there is no test
    set). A checkpoint of the initial weights is written before any step.
    On a non-finite loss or gradient, the last good weights are saved to
    ``last.ckpt`` and :class:`TrainingError` is raised. ``extra_meta`` is
    merged into every checkpoint's JSON blob.
    """
    cfg.validate()
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    trainer = Trainer(model, cfg, cfg.epochs * steps_per_epoch)
    result = TrainResult(optimizer=trainer.state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "last.ckpt", model, _checkpoint_meta(cfg, 0, 0, None, extra_meta), trainer.state)
        write_metrics(out / "metrics.csv", result.history)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        try:
            for images, labels in batch_iter(dataset, cfg.batch_size, cfg.seed, augment, epoch):
                losses.append(trainer.step(images, labels))
        except TrainingError:
            if out is not None:
                save_checkpoint(out / "last.ckpt", model,
                                _checkpoint_meta(cfg, epoch - 1, trainer.step_count, None,
                                                 extra_meta), trainer.state)
            raise
        test_acc = None
        if test_set is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            test_acc, _ = evaluate(model, test_set)
        rec = EpochRecord(epoch, trainer.step_count, trainer.last_lr, float(np.mean(losses)),
                          test_acc, time.perf_counter() - start)
        result.history.append(rec)
        log.info("epoch %d step %d lr %.3g loss %.4f acc %s", epoch, rec.step, rec.lr,
                 rec.train_loss, test_acc)
        if out is not None:
            meta = _checkpoint_meta(cfg, epoch, trainer.step_count, test_acc, extra_meta)
            save_checkpoint(out / "last.ckpt", model, meta, trainer.state)
            improved = test_acc is not None and (result.best_acc is None or test_acc > result.best_acc)
            if improved or (test_set is None and epoch == cfg.epochs):
                save_checkpoint(out / "best.ckpt", model, meta, trainer.state)
            write_metrics(out / "metrics.csv", result.history)
        if test_acc is not None and (result.best_acc is None or test_acc > result.best_acc):
            result.best_acc = test_acc
        if on_epoch is not None:
            on_epoch(rec)
    result.steps = trainer.step_count
    return result
