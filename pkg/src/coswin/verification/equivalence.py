"""Gamma-collapse equivalence and fusion-gradient probes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import tensor as T
from ..model import CoSwinModel, LocalFeatureEnhancer, ModelConfig
from ..tensor import Tensor, make_rng
from ..training.optim import cross_entropy


@dataclass
class EquivalenceReport:
    passed: bool
    max_forward_diff: float
    max_grad_rel: float
    batches: int
    first_divergence: Optional[str] = None
    tolerances: Tuple[float, float] = (1e-6, 1e-5)

    def summary(self) -> str:
        status = "pass" if self.passed else f"FAIL (first divergence: {self.first_divergence})"
        return (f"swin-collapse {status}: forward max|diff| {self.max_forward_diff:.3e}, "
                f"grad max rel {self.max_grad_rel:.3e} over {self.batches} batches")


def _stage_outputs(model: CoSwinModel, images) -> Tuple[List[Tuple[str, np.ndarray]], Tensor]:
    trace: list = []
    x, _, _ = model.forward_features(images, trace=trace)
    named = [(f"stage{i}", t.data) for i, (t, _, _) in enumerate(trace)]
    logits = model.head_from_normed(model.final_norm(x))
    named.append(("logits", logits.data))
    return named, logits


def swin_equivalence_check(config: ModelConfig, seed: int = 0, gamma: float = 0.0,
                           batches: int = 20, batch_size: int = 2, dtype=np.float32,
                           forward_tol: Optional[float] = None,
                           grad_tol: float = 1e-5) -> EquivalenceReport:
    """Full model with every gamma set to ``gamma`` vs the enhancer-free variant "a".

    Both models come from the same seed, so every shared parameter is
    identical. With gamma = 0 the conv branch contributes exactly nothing and
    the two must agree; any other gamma is a negative control and must fail.
    """
    forward_tol = forward_tol if forward_tol is not None else (1e-6 if dtype == np.float32 else 1e-12)
    full = CoSwinModel(config.replace(variant="d"), seed=seed, dtype=dtype)
    plain = CoSwinModel(config.replace(variant="a"), seed=seed, dtype=dtype)
    for enh in full.enhancers():
        enh.gamma.data = np.asarray(gamma, dtype=dtype)
    shared = dict(plain.named_parameters())
    full_params = dict(full.named_parameters())
    rng = make_rng(seed, "equivalence")
    H, W = config.image_size
    worst_fwd, worst_grad, first = 0.0, 0.0, None
    for _ in range(batches):
        images = rng.standard_normal((batch_size, H, W, config.in_channels)).astype(dtype)
        labels = rng.integers(0, config.num_classes, batch_size)
        outs_full, logits_full = _stage_outputs(full, images)
        outs_plain, logits_plain = _stage_outputs(plain, images)
        for (name, a), (_, b) in zip(outs_full, outs_plain):
            diff = float(np.max(np.abs(a.astype(np.float64) - b)))
            worst_fwd = max(worst_fwd, diff) if name == "logits" else worst_fwd
            if diff >= forward_tol and first is None:
                first = name
        g_full = T.backward(cross_entropy(logits_full, labels), accumulate=False)
        g_plain = T.backward(cross_entropy(logits_plain, labels), accumulate=False)
        for name, p in shared.items():
            a = g_full.get(full_params[name], np.zeros(p.shape))
            b = g_plain.get(p, np.zeros(p.shape))
            denom = max(float(np.max(np.abs(b))), 1e-12)
            rel = float(np.max(np.abs(a.astype(np.float64) - b))) / denom
            if rel > worst_grad:
                worst_grad = rel
            if rel >= grad_tol and first is None:
                first = f"grad:{name}"
    passed = worst_fwd < forward_tol and worst_grad < grad_tol and first is None
    return EquivalenceReport(passed, worst_fwd, worst_grad, batches, first, (forward_tol, grad_tol))


@dataclass
class FusionProbeReport:
    gamma_grad_rel: float
    linearity_rel: float
    zero_gamma_input_grad: float
    details: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-6) -> bool:
        return (self.gamma_grad_rel < tol and self.linearity_rel < tol
                and self.zero_gamma_input_grad == 0.0)


def _fused_grads(enhancer: LocalFeatureEnhancer, grid: np.ndarray, attn_out: np.ndarray,
                 upstream: np.ndarray, gamma: float):
    """Gradients of <upstream, a + gamma * F_conv(x)> for one gamma value."""
    enhancer.gamma.data = np.asarray(gamma, dtype=enhancer.gamma.dtype)
    x = Tensor(grid.copy(), requires_grad=True)
    a = Tensor(attn_out.copy(), requires_grad=True)
    y = T.add(a, enhancer(x))
    loss = T.tsum(T.mul(y, Tensor(upstream)))
    grads = T.backward(loss, accumulate=False)
    return grads, x


def fusion_gradient_probe(enhancer: LocalFeatureEnhancer, grid: np.ndarray,
                          upstream_grad: np.ndarray, attn_out: Optional[np.ndarray] = None,
                          gamma: Optional[float] = None) -> FusionProbeReport:
    """Check the three gradient identities of y = a + gamma * F_conv(x).

    (i) dL/dgamma equals <upstream, F_conv(x)>; (ii) conv-weight gradients at
    2*gamma are exactly twice those at gamma; (iii) with gamma = 0 the input
    receives exactly zero gradient through the conv path.
    """
    if enhancer.variant == "b":
        raise ValueError("variant b has no learnable gamma to probe")
    grid = np.asarray(grid)
    upstream_grad = np.asarray(upstream_grad, dtype=grid.dtype)
    attn_out = np.zeros_like(grid) if attn_out is None else np.asarray(attn_out, dtype=grid.dtype)
    g0 = float(enhancer.gamma.data) if gamma is None else gamma
    saved = enhancer.gamma.data
    try:
        with T.no_grad():
            feats = enhancer.conv_features(Tensor(grid)).data
        inner = float(np.sum(upstream_grad.astype(np.float64) * feats))
        grads, _ = _fused_grads(enhancer, grid, attn_out, upstream_grad, g0)
        dgamma = float(grads[enhancer.gamma])
        gamma_rel = abs(dgamma - inner) / max(abs(dgamma), abs(inner), 1e-12)

        conv_params = [p for n, p in enhancer.named_parameters() if n.startswith("conv")]
        once = {id(p): grads[p].copy() for p in conv_params}
        twice, _ = _fused_grads(enhancer, grid, attn_out, upstream_grad, 2 * g0)
        lin = 0.0
        for p in conv_params:
            a, b = 2 * once[id(p)].astype(np.float64), twice[p].astype(np.float64)
            lin = max(lin, float(np.max(np.abs(a - b))) / max(float(np.max(np.abs(a))), 1e-30))

        zero, x = _fused_grads(enhancer, grid, np.zeros_like(attn_out), upstream_grad, 0.0)
        # x only reaches the loss through the conv path here.
        gx = zero.get(x)
        zero_in = 0.0 if gx is None else float(np.max(np.abs(gx)))
    finally:
        enhancer.gamma.data = saved
    return FusionProbeReport(gamma_rel, lin, zero_in,
                             {"dL/dgamma": dgamma, "inner_product": inner, "gamma": g0})


__all__ = ["EquivalenceReport", "FusionProbeReport", "fusion_gradient_probe",
           "swin_equivalence_check"]
