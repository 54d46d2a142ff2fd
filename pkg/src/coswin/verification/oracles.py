"""Independent reference computations: scalar-loop attention, closed-form parameter counts,
and a perturbation probe for the conv branch's receptive field."""
from __future__ import annotations

import math
from typing import List, Set, Tuple

import numpy as np

from ..model import LocalFeatureEnhancer, ModelConfig, WindowAttention
from ..tensor import Tensor, no_grad


def attention_oracle(window, attn: WindowAttention, mask_slice=None) -> np.ndarray:
    """Single-window attention with explicit Python loops and ``math.exp``.

    ``window`` is [M*M, d]. Nothing here shares code with the vectorised path:
    projections, logits, the relative-bias lookup and the softmax are all
    written out per element in float64.
    """
    x = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64).tolist()
    t = len(x)
    d = attn.dim
    k = attn.num_heads
    dh = d // k
    M = attn.window
    wq = attn.qkv_weight.data.astype(np.float64).tolist()
    bq = attn.q_bias.data.astype(np.float64).tolist()
    bv = attn.v_bias.data.astype(np.float64).tolist()
    wp = attn.proj_weight.data.astype(np.float64).tolist()
    bp = attn.proj_bias.data.astype(np.float64).tolist()
    table = attn.relative_bias_table.data.astype(np.float64).tolist()
    mask = None if mask_slice is None else np.asarray(mask_slice, dtype=np.float64).tolist()

    def project(row, col0):
        out = []
        for c in range(d):
            s = 0.0
            for i in range(d):
                s += row[i] * wq[i][col0 + c]
            out.append(s)
        return out

    q = [[a + b for a, b in zip(project(r, 0), bq)] for r in x]
    kk = [project(r, d) for r in x]
    v = [[a + b for a, b in zip(project(r, 2 * d), bv)] for r in x]
    scale = 1.0 / math.sqrt(dh)
    mixed = [[0.0] * d for _ in range(t)]
    for h in range(k):
        lo = h * dh
        for i in range(t):
            yi, xi = divmod(i, M)
            logits = []
            for j in range(t):
                yj, xj = divmod(j, M)
                s = 0.0
                for c in range(lo, lo + dh):
                    s += q[i][c] * kk[j][c]
                bias = table[(yi - yj + M - 1) * (2 * M - 1) + (xi - xj + M - 1)][h]
                s = s * scale + bias
                if mask is not None:
                    s += mask[i][j]
                logits.append(s)
            top = max(logits)
            exps = [math.exp(z - top) for z in logits]
            total = sum(exps)
            for j in range(t):
                w = exps[j] / total
                for c in range(lo, lo + dh):
                    mixed[i][c] += w * v[j][c]
    out = []
    for i in range(t):
        row = []
        for c in range(d):
            s = bp[c]
            for e in range(d):
                s += mixed[i][e] * wp[e][c]
            row.append(s)
        out.append(row)
    return np.array(out)


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Trainable parameter count derived from the layer formulas, without building a model."""
    cfg.validate()
    C, P, d0, M = cfg.in_channels, cfg.patch_size, cfg.embed_dim, cfg.window_size
    total = P * P * C * d0 + d0 + 2 * d0
    for i, depth in enumerate(cfg.stage_depths):
        D = d0 * 2 ** i
        if i > 0:
            prev = D // 2
            total += 2 * 4 * prev + 4 * prev * 2 * prev
        hidden_mlp = int(round(cfg.mlp_ratio * D))
        hc = math.ceil(round(cfg.conv_expand_ratio * 1000) * D / 1000)
        heads = cfg.num_heads[i]
        per_block = (
            2 * D                                  # norm1
            + D * 3 * D + 2 * D                    # qkv weight, q and v biases
            + D * D + D                            # proj
            + (2 * M - 1) ** 2 * heads             # relative bias table
            + 2 * D                                # norm2
            + D * hidden_mlp + hidden_mlp + hidden_mlp * D + D
        )
        conv = {
            "a": 0,
            "b": 9 * D * hc + hc + 9 * hc * D + D,
            "c": 9 * D * D + D + 1,
            "d": 9 * D * hc + hc + 9 * hc * D + D + 1,
        }[cfg.variant]
        total += depth * (per_block + conv)
    df = d0 * 2 ** (cfg.num_stages - 1)
    total += 2 * df + df * cfg.num_classes + cfg.num_classes
    return total


def conv_locality_probe(enhancer: LocalFeatureEnhancer, grid_shape: Tuple[int, int, int],
                        pos: Tuple[int, int], seed: int = 0) -> Set[Tuple[int, int]]:
    """Output positions that change when the input at ``pos`` is perturbed.

    For two stacked 3x3 convolutions the answer must lie inside the 5x5
    neighbourhood of ``pos``.
    """
    h, w, c = grid_shape
    rng = np.random.default_rng(seed)
    dtype = enhancer.conv1_weight.dtype
    base = rng.standard_normal((1, h, w, c)).astype(dtype)
    bumped = base.copy()
    bumped[0, pos[0], pos[1]] += rng.standard_normal(c).astype(dtype) * 5.0
    with no_grad():
        a = enhancer.conv_features(Tensor(base)).data[0]
        b = enhancer.conv_features(Tensor(bumped)).data[0]
    changed = np.any(a != b, axis=-1)
    return {(int(y), int(x)) for y, x in zip(*np.nonzero(changed))}


def expected_stage_shapes(cfg: ModelConfig) -> List[Tuple[int, int]]:
    """(tokens, channels) after each stage: N / 4^i tokens with 2^i * d channels."""
    n = cfg.grid_size[0] * cfg.grid_size[1]
    return [(n // 4 ** i, cfg.embed_dim * 2 ** i) for i in range(cfg.num_stages)]


def shifted_cross_region_max(weights: np.ndarray, mask: np.ndarray) -> float:
    """Largest post-softmax weight on a masked (cross-region) pair."""
    masked = np.broadcast_to(np.asarray(mask)[:, None] < 0, weights.shape[-4:])
    return float(np.max(np.where(masked, weights, 0.0))) if masked.any() else 0.0


__all__ = [
    "attention_oracle", "closed_form_param_count", "conv_locality_probe",
    "expected_stage_shapes", "shifted_cross_region_max",
]
