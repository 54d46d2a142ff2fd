"""AdamW, warmup-cosine schedule, gradient clipping, cross-entropy."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigError, ContractError, TrainingError
from ..tensor import Tensor, record


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 10.0
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    grad_clip_norm: Optional[float] = 5.0
    eval_every: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if not self.base_lr > self.min_lr >= 0:
            raise ConfigError("need base_lr > min_lr >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config key(s): {', '.join(unknown)}")
        return cls(**data)


# -- schedule ---------------------------------------------------------------

def warmup_cosine(step: int, total_steps: int, warmup_steps: int, base_lr: float,
                  min_lr: float) -> float:
    """Linear warmup 0 -> base_lr, then cosine decay base_lr -> min_lr at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    """Warmup length in steps: ``warmup_epochs`` times the steps per epoch."""
    if cfg.epochs == 0:
        return 0
    return int(round(cfg.warmup_epochs * total_steps / cfg.epochs))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return warmup_cosine(step, total_steps, warmup_steps(total_steps, cfg), cfg.base_lr, cfg.min_lr)


# -- decay exemption --------------------------------------------------------

_NO_DECAY_SUFFIXES = ("bias", "gain", "gamma", "relative_bias_table")


def decays(name: str) -> bool:
    """Whether AdamW applies weight decay to the parameter called ``name``."""
    return not name.endswith(_NO_DECAY_SUFFIXES)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: Sequence[Tuple[str, Tensor]], grads: Dict[str, np.ndarray],
               state: OptimizerState, lr: float, weight_decay: float = 0.05,
               betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, _ in params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data = p.data
        if weight_decay and decays(name):
            data = data * (1.0 - lr * weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = np.asarray(data - lr * update, dtype=p.dtype)
    return state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# -- loss -------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    B, K = logits.shape
    if B == 0:
        raise ContractError("empty batch")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"label outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(lse - z[rows, labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return record("cross_entropy", np.asarray(loss), (logits,), bw)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    return float(np.mean(np.argmax(logits, axis=1) == labels))

