"""CoSwin forward computation: patch pipeline, fused window attention, stages, head."""
from __future__ import annotations

import functools
import math
from typing import List, Optional, Tuple

import numpy as np

from .. import tensor as T
from ..exceptions import ConfigError, ContractError, ShapeError
from ..tensor import Tensor
from .config import ModelConfig
from .layers import (
    CoSwinBlock,
    LayerNorm,
    Linear,
    LocalFeatureEnhancer,
    Module,
    PatchEmbed,
    PatchMerge,
    WindowAttention,
)

MASK_VALUE = -1e4


# -- patch pipeline ---------------------------------------------------------

def patchify(images: Tensor, patch: int) -> Tensor:
    """[B, H, W, C] -> [B, N, P*P*C]; patches row-major, pixels (row, col, channel) inside."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {patch}")
    x = T.reshape(images, (B, H // patch, patch, W // patch, patch, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, (H // patch) * (W // patch), patch * patch * C))


def patch_embed(images: Tensor, embed: PatchEmbed) -> Tensor:
    """Linear projection of every flattened patch, then LayerNorm."""
    return embed.norm(embed.proj(patchify(images, embed.patch)))


def merge_neighbors(tokens: Tensor, h: int, w: int) -> Tensor:
    """Concatenate each 2x2 neighbourhood: top-left, top-right, bottom-left, bottom-right."""
    B, N, d = tokens.shape
    if h * w != N:
        raise ShapeError(f"grid {h}x{w} does not hold {N} tokens")
    if h % 2 or w % 2:
        raise ShapeError(f"cannot merge odd grid {h}x{w}")
    x = T.reshape(tokens, (B, h // 2, 2, w // 2, 2, d))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, (h // 2) * (w // 2), 4 * d))


def patch_merge(tokens: Tensor, h: int, w: int, merge: PatchMerge) -> Tensor:
    """[B, h*w, d] -> [B, h*w/4, 2d]."""
    return merge.reduction(merge.norm(merge_neighbors(tokens, h, w)))


def tokens_to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    lead, (n, d) = tokens.shape[:-2], tokens.shape[-2:]
    if h * w != n:
        raise ShapeError(f"grid {h}x{w} does not hold {n} tokens")
    return T.reshape(tokens, lead + (h, w, d))


def patch_convert(tokens: Tensor) -> Tensor:
    """[..., N, d] -> [..., sqrt(N), sqrt(N), d] for a perfect-square N."""
    n = tokens.shape[-2]
    side = math.isqrt(n)
    if side * side != n:
        raise ContractError(f"patch_convert needs a perfect-square token count, got N={n}")
    return tokens_to_grid(tokens, side, side)


def grid_to_tokens(grid: Tensor) -> Tensor:
    lead, (h, w, d) = grid.shape[:-3], grid.shape[-3:]
    return T.reshape(grid, lead + (h * w, d))


# -- windows ----------------------------------------------------------------

def window_partition(grid: Tensor, window: int) -> Tensor:
    """[..., h, w, d] -> [..., S, M*M, d]; windows and tokens both row-major."""
    lead, (h, w, d) = grid.shape[:-3], grid.shape[-3:]
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    k = len(lead)
    x = T.reshape(grid, lead + (nh, window, nw, window, d))
    axes = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    x = T.permute(x, axes)
    return T.reshape(x, lead + (nh * nw, window * window, d))


def window_merge(windows: Tensor, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    lead, (s, t, d) = windows.shape[:-3], windows.shape[-3:]
    window = math.isqrt(t)
    if window * window != t or (h // window) * (w // window) != s or h % window or w % window:
        raise ShapeError(f"windows {windows.shape} do not tile a {h}x{w} grid")
    nh, nw = h // window, w // window
    k = len(lead)
    x = T.reshape(windows, lead + (nh, nw, window, window, d))
    axes = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    x = T.permute(x, axes)
    return T.reshape(x, lead + (h, w, d))


@functools.lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    labels = np.zeros((h, w), dtype=np.int64)
    bands_h = ((0, h - window), (h - window, h - shift), (h - shift, h))
    bands_w = ((0, w - window), (w - window, w - shift), (w - shift, w))
    region = 0
    for r0, r1 in bands_h:
        for c0, c1 in bands_w:
            labels[r0:r1, c0:c1] = region
            region += 1
    win = labels.reshape(h // window, window, w // window, window)
    win = win.transpose(0, 2, 1, 3).reshape(-1, window * window)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(h: int, w: int, window: int, shift: Optional[int] = None) -> np.ndarray:
    """Additive [S, M*M, M*M] mask for attention on a grid cyclically shifted by ``shift``.

    Pairs whose tokens came from different (non-adjacent) image regions get
    -1e4; all other pairs get 0.
    """
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    shift = window // 2 if shift is None else shift
    return _shift_mask(h, w, window, shift)


def window_attention(windows: Tensor, attn: WindowAttention,
                     mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head self-attention inside every window, with relative position bias.

    ``windows`` is [..., S, M*M, d]; ``mask`` (if given) is [S, M*M, M*M] and
    is shared over any leading batch axes.
    """
    lead, (s, t, d) = windows.shape[:-3], windows.shape[-3:]
    if d != attn.dim or t != attn.window ** 2:
        raise ShapeError(f"windows {windows.shape} do not fit attention dim={attn.dim}, "
                         f"M={attn.window}")
    if mask is not None and tuple(np.shape(mask)) != (s, t, t):
        raise ShapeError(f"mask shape {np.shape(mask)} != {(s, t, t)}")
    k, dh = attn.num_heads, attn.head_dim
    n = int(np.prod(lead, dtype=np.int64)) * s
    x = T.reshape(windows, (n, t, d))
    qkv = T.linear(x, attn.qkv_weight, attn.qkv_bias())
    qkv = T.permute(T.reshape(qkv, (n, t, 3, k, dh)), (2, 0, 3, 1, 4))
    q, key, v = qkv[0], qkv[1], qkv[2]
    logits = T.matmul(T.scale(q, dh ** -0.5), T.transpose_last(key))
    logits = T.add(logits, attn.relative_bias())
    if mask is not None:
        m = Tensor(np.asarray(mask, dtype=logits.dtype)[None, :, None])
        logits = T.reshape(T.add(T.reshape(logits, (-1, s, k, t, t)), m), (n, k, t, t))
    weights = T.softmax(logits)
    out = T.matmul(weights, v)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (n, t, d))
    out = T.linear(out, attn.proj_weight, attn.proj_bias)
    return T.reshape(out, lead + (s, t, d))


def attention_weights(windows: Tensor, attn: WindowAttention,
                      mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Post-softmax weights [..., S, heads, M*M, M*M] (inspection only, no tape)."""
    lead, (s, t, d) = windows.shape[:-3], windows.shape[-3:]
    k, dh = attn.num_heads, attn.head_dim
    x = windows.data.reshape(-1, t, d)
    qkv = (x @ attn.qkv_weight.data + attn.qkv_bias().data).reshape(-1, t, 3, k, dh)
    qkv = qkv.transpose(2, 0, 3, 1, 4)
    logits = (qkv[0] * dh ** -0.5) @ np.swapaxes(qkv[1], -1, -2) + attn.relative_bias().data
    logits = logits.reshape(lead + (s, k, t, t))
    if mask is not None:
        logits = logits + np.asarray(mask)[:, None]
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


# -- fused attention --------------------------------------------------------

def local_feature_enhance(grid: Tensor, enhancer: LocalFeatureEnhancer) -> Tensor:
    """gamma * conv2(relu(conv1(grid))) with spatial size preserved."""
    return enhancer(grid)


def _attention_on_grid(grid: Tensor, block: CoSwinBlock, shift: int) -> Tensor:
    h, w = grid.shape[-3], grid.shape[-2]
    M = block.window
    if shift:
        shifted = T.cyclic_shift(grid, shift, shift)
        mask = build_shift_mask(h, w, M, shift)
        out = window_merge(window_attention(window_partition(shifted, M), block.attn, mask), h, w)
        return T.cyclic_shift(out, -shift, -shift)
    return window_merge(window_attention(window_partition(grid, M), block.attn), h, w)


def coswin_msa(tokens: Tensor, h: int, w: int, block: CoSwinBlock) -> Tensor:
    """Window attention over the (already normalised) tokens plus the weighted conv branch."""
    grid = tokens_to_grid(tokens, h, w)
    out = _attention_on_grid(grid, block, 0)
    if block.enhancer is not None:
        out = T.add(out, block.enhancer(grid))
    return grid_to_tokens(out)


def coswin_shifted_msa(tokens: Tensor, h: int, w: int, block: CoSwinBlock) -> Tensor:
    """Shifted-window variant; the conv branch sees the un-shifted grid."""
    grid = tokens_to_grid(tokens, h, w)
    out = _attention_on_grid(grid, block, block.window // 2)
    if block.enhancer is not None:
        out = T.add(out, block.enhancer(grid))
    return grid_to_tokens(out)


def drop_path(branch: Tensor, rate: float, train: bool,
              rng: Optional[np.random.Generator]) -> Optional[Tensor]:
    """Per-sample stochastic depth with inverted scaling; ``None`` means dropped entirely."""
    if not train or rate <= 0.0:
        return branch
    if rate >= 1.0:
        return None
    if rng is None:
        raise ContractError("drop_path in train mode needs an rng")
    keep = (rng.random(branch.shape[0]) >= rate).astype(branch.dtype) / (1.0 - rate)
    return T.mul(branch, Tensor(keep.reshape((-1,) + (1,) * (branch.ndim - 1))))


def _residual(z: Tensor, branch: Tensor, rate: float, train: bool, rng) -> Tensor:
    kept = drop_path(branch, rate, train, rng)
    return z if kept is None else T.add(z, kept)


def coswin_block(z: Tensor, h: int, w: int, block: CoSwinBlock, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """One attention-MLP sequence with pre-LN and residuals."""
    msa = coswin_shifted_msa if block.shift else coswin_msa
    z = _residual(z, msa(block.norm1(z), h, w, block), block.drop_path, train, rng)
    return _residual(z, block.mlp(block.norm2(z)), block.drop_path, train, rng)


def coswin_block_pair(z: Tensor, h: int, w: int, block_w: CoSwinBlock, block_sw: CoSwinBlock,
                      train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Regular-window block followed by its shifted-window twin."""
    if block_w.shift or not block_sw.shift:
        raise ContractError("block pair must be (non-shifted, shifted)")
    z = coswin_block(z, h, w, block_w, train, rng)
    return coswin_block(z, h, w, block_sw, train, rng)


# -- full model -------------------------------------------------------------

class Stage(Module):
    def __init__(self, merge: Optional[PatchMerge], blocks: List[CoSwinBlock]):
        self.merge = merge
        self.blocks = blocks


class CoSwinModel(Module):
    """Hierarchical CoSwin classifier built from a :class:`ModelConfig`.

    Parameters are drawn from per-name random streams, so two models built
    with the same seed share identical values for every parameter name they
    have in common (the ablation variants rely on this).
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        eps = config.ln_eps
        self.patch_embed = PatchEmbed(config.patch_size, config.in_channels, config.embed_dim,
                                      eps, dtype)
        rates = config.drop_path_rates()
        stages = []
        idx = 0
        for i, depth in enumerate(config.stage_depths):
            dim = config.stage_dim(i)
            merge = PatchMerge(config.stage_dim(i - 1), eps, dtype) if i > 0 else None
            blocks = []
            for j in range(depth):
                blocks.append(CoSwinBlock(
                    dim, config.num_heads[i], config.window_size,
                    mlp_hidden=int(round(config.mlp_ratio * dim)),
                    conv_hidden=config.conv_hidden(dim),
                    shift=bool(j % 2), drop_path=rates[idx], variant=config.variant,
                    gamma_init=config.gamma_init, eps=eps, dtype=dtype,
                ))
                idx += 1
            stages.append(Stage(merge, blocks))
        self.stages = stages
        d_final = config.stage_dim(config.num_stages - 1)
        self.final_norm = LayerNorm(d_final, eps, dtype)
        self.head = Linear(d_final, config.num_classes, dtype=dtype)
        self.reset_parameters(seed)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def blocks(self) -> List[CoSwinBlock]:
        return [b for s in self.stages for b in s.blocks]

    def enhancers(self) -> List[LocalFeatureEnhancer]:
        return [b.enhancer for b in self.blocks() if b.enhancer is not None]

    def _as_images(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[0] == 0:
            raise ContractError(f"expected a non-empty [B, H, W, C] batch, got {x.shape}")
        H, W = self.config.image_size
        if x.shape[1:] != (H, W, self.config.in_channels):
            raise ShapeError(f"image shape {x.shape[1:]} != config {(H, W, self.config.in_channels)}")
        return x

    def forward_features(self, images, train: bool = False,
                         rng: Optional[np.random.Generator] = None,
                         trace: Optional[list] = None) -> Tuple[Tensor, int, int]:
        """Tokens after the last stage, before the final norm, with their grid size.

        When ``trace`` is a list, (tokens, h, w) after every stage is appended.
        """
        x = patch_embed(self._as_images(images), self.patch_embed)
        h, w = self.config.grid_size
        for stage in self.stages:
            if stage.merge is not None:
                x = patch_merge(x, h, w, stage.merge)
                h, w = h // 2, w // 2
            for blk_w, blk_sw in zip(stage.blocks[0::2], stage.blocks[1::2]):
                x = coswin_block_pair(x, h, w, blk_w, blk_sw, train, rng)
            if trace is not None:
                trace.append((x, h, w))
        return x, h, w

    def head_from_normed(self, normed: Tensor) -> Tensor:
        return self.head(T.mean(normed, axis=-2))

    def forward(self, images, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits [B, K]."""
        x, _, _ = self.forward_features(images, train, rng)
        return self.head_from_normed(self.final_norm(x))

    __call__ = forward


def forward(model: CoSwinModel, images, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    return model.forward(images, train_mode, rng)
