"""Hyperparameter record that fixes every tensor shape of a CoSwin model."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Tuple

from ..exceptions import ConfigError

VARIANTS = ("a", "b", "c", "d")


@dataclass
class ModelConfig:
    image_size: Tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch_size: int = 2
    embed_dim: int = 48
    stage_depths: List[int] = field(default_factory=lambda: [2, 2, 2])
    num_heads: List[int] = field(default_factory=lambda: [2, 4, 8])
    window_size: int = 4
    mlp_ratio: float = 4.0
    conv_expand_ratio: float = 1.10
    gamma_init: float = 0.1
    drop_path_max: float = 0.1
    num_classes: int = 10
    variant: str = "d"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.stage_depths = [int(v) for v in self.stage_depths]
        self.num_heads = [int(v) for v in self.num_heads]

    # -- derived quantities ----------------------------------------------
    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    @property
    def shift_size(self) -> int:
        return self.window_size // 2

    @property
    def grid_size(self) -> Tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * 2 ** stage

    def stage_grid(self, stage: int) -> Tuple[int, int]:
        h, w = self.grid_size
        return h // 2 ** stage, w // 2 ** stage

    def conv_hidden(self, dim: int) -> int:
        """Hidden width of the first conv: ceil(conv_expand_ratio * dim), computed exactly."""
        return math.ceil(Fraction(str(self.conv_expand_ratio)) * dim)

    def drop_path_rates(self) -> List[float]:
        total = sum(self.stage_depths)
        if total == 1:
            return [0.0]
        return [self.drop_path_max * i / (total - 1) for i in range(total)]

    # -- validation ------------------------------------------------------
    def validate(self) -> "ModelConfig":
        H, W = self.image_size
        P, M = self.patch_size, self.window_size
        if min(H, W, self.in_channels, P, self.embed_dim, M, self.num_classes) < 1:
            raise ConfigError("sizes must be positive")
        if H % P or W % P:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {P}")
        if not self.stage_depths:
            raise ConfigError("stage_depths must not be empty")
        if len(self.num_heads) != self.num_stages:
            raise ConfigError(
                f"num_heads has {len(self.num_heads)} entries for {self.num_stages} stages"
            )
        h, w = H // P, W // P
        for i, depth in enumerate(self.stage_depths):
            if depth < 2 or depth % 2:
                raise ConfigError(f"stage_depths[{i}]={depth} must be even and >= 2")
            if i > 0:
                if h % 2 or w % 2:
                    raise ConfigError(f"stage {i - 1} grid {h}x{w} is odd and cannot be merged")
                h, w = h // 2, w // 2
            if h % M or w % M:
                raise ConfigError(f"stage {i} grid {h}x{w} not divisible by window_size {M}")
            d = self.stage_dim(i)
            if d % self.num_heads[i]:
                raise ConfigError(f"stage {i} dim {d} not divisible by {self.num_heads[i]} heads")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.drop_path_max <= 1.0:
            raise ConfigError("drop_path_max must lie in [0, 1]")
        if self.mlp_ratio <= 0 or self.conv_expand_ratio <= 0:
            raise ConfigError("mlp_ratio and conv_expand_ratio must be positive")
        return self

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["image_size"] = list(self.image_size)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def cifar_desk_config(**overrides) -> ModelConfig:
    """Default desk configuration for 32x32x3 inputs."""
    return ModelConfig(**overrides).validate()


def mnist_desk_config(**overrides) -> ModelConfig:
    """Default desk configuration for 28x28x1 inputs (two stages, M=7).

    The 7x7 window is odd; shifted blocks move by floor(7/2) = 3.
    """
    base = dict(
        image_size=(28, 28), in_channels=1, patch_size=2, embed_dim=48,
        stage_depths=[2, 2], num_heads=[2, 4], window_size=7, num_classes=10,
    )
    base.update(overrides)
    cfg = ModelConfig(**base)
    return cfg.validate()
