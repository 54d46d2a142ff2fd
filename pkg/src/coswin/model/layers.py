"""Parameter containers used by the CoSwin model."""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .. import tensor as T
from ..tensor import Tensor

# Leaf names that receive trunc-normal(0.02) init; every other parameter
# keeps the constant it was constructed with.
RANDOM_INIT_SUFFIXES = ("weight", "relative_bias_table")
INIT_STD = 0.02


class Module:
    """Attribute-walking parameter registry (insertion order is the canonical order)."""

    def named_tensors(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_tensors(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{prefix}{key}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def reset_parameters(self, seed: int) -> None:
        """Re-draw random parameters; each one from its own (seed, name) stream."""
        for name, p in self.named_parameters():
            if name.endswith(RANDOM_INIT_SUFFIXES):
                rng = T.make_rng(seed, name)
                p.data = T.trunc_normal(p.shape, INIT_STD, rng, dtype=p.dtype)


def _param(shape, value: float = 0.0, dtype=np.float32) -> Tensor:
    return T.constant_tensor(shape, value, dtype=dtype)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = _param((dim,), 1.0, dtype)
        self.bias = _param((dim,), 0.0, dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, dtype=np.float32):
        self.weight = _param((d_in, d_out), 0.0, dtype)
        self.bias = _param((d_out,), 0.0, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, dtype=dtype)
        self.fc2 = Linear(hidden, dim, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class LocalFeatureEnhancer(Module):
    """Gamma-weighted convolution branch on the token grid.

    ``variant`` follows the ablation table: "d" is two convs with a
    learnable gamma, "b" the same convs with gamma frozen at 1, "c" a
    single d->d conv + ReLU with a learnable gamma.
    """

    def __init__(self, dim: int, hidden: int, gamma_init: float = 0.1, variant: str = "d",
                 dtype=np.float32):
        self.variant = variant
        self.dim = dim
        if variant == "c":
            self.conv1_weight = _param((3, 3, dim, dim), 0.0, dtype)
            self.conv1_bias = _param((dim,), 0.0, dtype)
        else:
            self.conv1_weight = _param((3, 3, dim, hidden), 0.0, dtype)
            self.conv1_bias = _param((hidden,), 0.0, dtype)
            self.conv2_weight = _param((3, 3, hidden, dim), 0.0, dtype)
            self.conv2_bias = _param((dim,), 0.0, dtype)
        if variant == "b":
            self.gamma = T.constant_tensor((), 1.0, dtype=dtype, requires_grad=False)
        else:
            self.gamma = _param((), gamma_init, dtype)

    def conv_features(self, grid: Tensor) -> Tensor:
        """Unweighted branch output F_conv."""
        h = T.relu(T.conv2d_3x3(grid, self.conv1_weight, self.conv1_bias))
        if self.variant == "c":
            return h
        return T.conv2d_3x3(h, self.conv2_weight, self.conv2_bias)

    def __call__(self, grid: Tensor) -> Tensor:
        return T.mul(self.conv_features(grid), self.gamma)


def relative_position_index(window: int) -> np.ndarray:
    """[M^2, M^2] lookup into a (2M-1)^2 table, keyed only by (drow, dcol)."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel + (window - 1)
    return (rel[0] * (2 * window - 1) + rel[1]).astype(np.int64)


class WindowAttention(Module):
    def __init__(self, dim: int, num_heads: int, window: int, dtype=np.float32):
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.qkv_weight = _param((dim, 3 * dim), 0.0, dtype)
        # No key bias: it shifts every logit in a softmax row equally, so it
        # would never receive gradient.
        self.q_bias = _param((dim,), 0.0, dtype)
        self.v_bias = _param((dim,), 0.0, dtype)
        self.proj_weight = _param((dim, dim), 0.0, dtype)
        self.proj_bias = _param((dim,), 0.0, dtype)
        self.relative_bias_table = _param(((2 * window - 1) ** 2, num_heads), 0.0, dtype)
        self.relative_index = relative_position_index(window)

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def qkv_bias(self) -> Tensor:
        """[q_bias, 0, v_bias] as one 3d vector."""
        zeros = Tensor(np.zeros(self.dim, dtype=self.q_bias.dtype))
        return T.concat([self.q_bias, zeros, self.v_bias])

    def relative_bias(self) -> Tensor:
        """B as [heads, M^2, M^2]."""
        t = self.window ** 2
        b = T.take_rows(self.relative_bias_table, self.relative_index.reshape(-1))
        return T.permute(T.reshape(b, (t, t, self.num_heads)), (2, 0, 1))


class PatchEmbed(Module):
    def __init__(self, patch: int, in_ch: int, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.patch = patch
        self.proj = Linear(patch * patch * in_ch, dim, dtype=dtype)
        self.norm = LayerNorm(dim, eps, dtype)


class PatchMerge(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.norm = LayerNorm(4 * dim, eps, dtype)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, dtype=dtype)


class CoSwinBlock(Module):
    def __init__(self, dim: int, num_heads: int, window: int, mlp_hidden: int,
                 conv_hidden: int, shift: bool, drop_path: float, variant: str = "d",
                 gamma_init: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.shift = shift
        self.drop_path = drop_path
        self.window = window
        self.norm1 = LayerNorm(dim, eps, dtype)
        self.attn = WindowAttention(dim, num_heads, window, dtype)
        self.enhancer: Optional[LocalFeatureEnhancer] = (
            None if variant == "a"
            else LocalFeatureEnhancer(dim, conv_hidden, gamma_init, variant, dtype)
        )
        self.norm2 = LayerNorm(dim, eps, dtype)
        self.mlp = Mlp(dim, mlp_hidden, dtype)
