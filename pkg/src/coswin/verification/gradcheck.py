"""Central-difference gradient checking for the tensor engine and the model."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .. import tensor as T
from ..exceptions import ContractError, PrecisionError
from ..model import CoSwinBlock, CoSwinModel, ModelConfig, build_shift_mask, coswin_block_pair
from ..model import coswin_msa, coswin_shifted_msa, local_feature_enhance, window_attention
from ..model import window_partition
from ..tensor import Tensor, make_rng
from ..training.optim import cross_entropy

FULL_CHECK_LIMIT = 512
SAMPLED_COORDS = 64
DEFAULT_TOL = 1e-5


@dataclass
class LeafError:
    max_rel_error: float
    argmax: Tuple[int, ...]
    checked: int


@dataclass
class GradCheckReport:
    name: str
    entries: Dict[str, LeafError] = field(default_factory=dict)
    eps: float = 1e-4
    precision: str = "float64"

    @property
    def max_error(self) -> float:
        return max((e.max_rel_error for e in self.entries.values()), default=0.0)

    @property
    def worst(self) -> Optional[str]:
        if not self.entries:
            return None
        return max(self.entries, key=lambda k: self.entries[k].max_rel_error)

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_error < tol

    def summary(self) -> str:
        worst = self.worst
        where = f" at {worst}{list(self.entries[worst].argmax)}" if worst else ""
        return f"{self.name}: max rel err {self.max_error:.3e}{where} ({len(self.entries)} leaves)"


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _coords(size: int, shape, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    if size <= FULL_CHECK_LIMIT:
        flat = np.arange(size)
    else:
        flat = rng.choice(size, SAMPLED_COORDS, replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def finite_diff_gradcheck(fn: Callable[[], Tensor], point: Mapping[str, Tensor], eps: float = 1e-4,
                          seed: int = 0, name: str = "fn") -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``point`` names the leaves to perturb. Any other requires-grad leaf the
    function touches is checked too, under a generated name, so the report
    always covers every leaf reached by the backward pass.
    """
    out = fn()
    if out.ndim != 0:
        raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
    for key, t in point.items():
        if t.dtype != np.float64:
            raise PrecisionError(f"gradcheck needs float64 leaves; {key} is {t.dtype}")
    grads = T.backward(out, accumulate=False)
    known = {id(t): key for key, t in point.items()}
    leaves: Dict[str, Tensor] = dict(point)
    for i, t in enumerate(grads):
        if id(t) not in known:
            if t.dtype != np.float64:
                raise PrecisionError(f"gradcheck needs float64 leaves; leaf {i} is {t.dtype}")
            leaves[f"<leaf{i}{list(t.shape)}>"] = t
    report = GradCheckReport(name, eps=eps)
    rng = make_rng(seed, "gradcheck", name)
    for key, t in leaves.items():
        if not isinstance(t.data, np.ndarray) or not t.data.flags.writeable:
            t.data = np.array(t.data)
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        worst, where = 0.0, ()
        coords = _coords(t.size, t.shape, rng)
        for idx in coords:
            orig = t.data[idx]
            with T.no_grad():
                t.data[idx] = orig + eps
                plus = float(fn().data)
                t.data[idx] = orig - eps
                minus = float(fn().data)
            t.data[idx] = orig
            err = _rel_error(float(analytic[idx]), (plus - minus) / (2 * eps))
            if err > worst or not where:
                worst, where = err, idx
        report.entries[key] = LeafError(worst, where, len(coords))
    return report


# -- suites -----------------------------------------------------------------

def _randn(rng, shape, lo: float = 0.0) -> Tensor:
    """Double-precision leaf; with ``lo`` > 0 values avoid (-lo, lo) to keep kinks away."""
    x = rng.standard_normal(shape)
    if lo:
        x = np.sign(x) * (np.abs(x) + lo)
    return Tensor(x, requires_grad=True)


OpCase = Tuple[Callable[[], Tensor], Dict[str, Tensor]]


def _op_cases(rng) -> Dict[str, OpCase]:
    # Each case scores its output as sum(out * R) with a fixed random R.
    cases: Dict[str, OpCase] = {}

    def add_case(name, builder, leaves):
        probe = Tensor(rng.standard_normal(builder().shape))
        cases[name] = (lambda: T.tsum(T.mul(builder(), probe)), leaves)

    a, b = _randn(rng, (3, 4)), _randn(rng, (4,))
    add_case("add", lambda: T.add(a, b), {"a": a, "b": b})
    c, d = _randn(rng, (2, 3, 4)), _randn(rng, (3, 1))
    add_case("sub", lambda: T.sub(c, d), {"a": c, "b": d})
    e, f = _randn(rng, (3, 4)), _randn(rng, (1, 4))
    add_case("mul", lambda: T.mul(e, f), {"a": e, "b": f})
    g = _randn(rng, (5,))
    add_case("scale", lambda: T.scale(g, -1.7), {"x": g})
    h = _randn(rng, (4, 5), lo=0.05)
    add_case("relu", lambda: T.relu(h), {"x": h})
    i = _randn(rng, (4, 5))
    add_case("gelu", lambda: T.gelu(i), {"x": i})
    ma, mb = _randn(rng, (2, 3, 4)), _randn(rng, (2, 4, 5))
    add_case("matmul", lambda: T.matmul(ma, mb), {"a": ma, "b": mb})
    lx, lw, lb = _randn(rng, (2, 3, 4)), _randn(rng, (4, 5)), _randn(rng, (5,))
    add_case("linear", lambda: T.linear(lx, lw, lb), {"x": lx, "weight": lw, "bias": lb})
    sx = _randn(rng, (3, 6))
    add_case("softmax", lambda: T.softmax(sx), {"x": sx})
    nx, ng, nb = _randn(rng, (3, 6)), _randn(rng, (6,)), _randn(rng, (6,))
    add_case("layer_norm", lambda: T.layer_norm(nx, ng, nb, 1e-5),
             {"x": nx, "gain": ng, "bias": nb})
    cx, cw, cb = _randn(rng, (2, 4, 5, 3)), _randn(rng, (3, 3, 3, 2)), _randn(rng, (2,))
    add_case("conv2d_3x3", lambda: T.conv2d_3x3(cx, cw, cb), {"x": cx, "weight": cw, "bias": cb})
    rx = _randn(rng, (2, 6))
    add_case("reshape", lambda: T.reshape(rx, (3, 4)), {"x": rx})
    px = _randn(rng, (2, 3, 4))
    add_case("permute", lambda: T.permute(px, (2, 0, 1)), {"x": px})
    ux = _randn(rng, (3, 4))
    add_case("sum", lambda: T.tsum(ux, axis=0), {"x": ux})
    vx = _randn(rng, (3, 4))
    add_case("mean", lambda: T.mean(vx, axis=-1, keepdims=True), {"x": vx})
    k1, k2 = _randn(rng, (2, 3)), _randn(rng, (2, 2))
    add_case("concat", lambda: T.concat([k1, k2], axis=1), {"a": k1, "b": k2})
    gx = _randn(rng, (4, 5))
    rows = np.array([0, 2, 2, 3])
    add_case("getitem", lambda: T.add(T.getitem(gx, (slice(1, 3), slice(None, None, 2))),
                                      T.tsum(T.getitem(gx, (rows, rows)))), {"x": gx})
    tt = _randn(rng, (5, 2))
    index = np.array([[0, 4, 4], [1, 0, 3]])
    add_case("take_rows", lambda: T.take_rows(tt, index), {"table": tt})
    cs = _randn(rng, (2, 4, 4, 3))
    add_case("cyclic_shift", lambda: T.cyclic_shift(cs, 1, 3), {"grid": cs})
    ls = _randn(rng, (3, 5))
    add_case("log_softmax", lambda: T.log_softmax(ls), {"x": ls})
    ex = _randn(rng, (3, 4))
    add_case("exp", lambda: T.exp(ex), {"x": ex})
    # Wider spreads leave probabilities near 1e-7 whose gradients sit below
    # the central-difference roundoff floor.
    logits = Tensor(rng.standard_normal((4, 5)) * 1.5, requires_grad=True)
    labels = np.array([0, 4, 2, 2])
    cases["cross_entropy"] = (lambda: cross_entropy(logits, labels), {"logits": logits})
    return cases


def _tiny_block_pair(rng, dim: int = 6, heads: int = 2, window: int = 2,
                     hidden: int = 7) -> Tuple[CoSwinBlock, CoSwinBlock]:
    blocks = []
    for shift in (False, True):
        blk = CoSwinBlock(dim, heads, window, mlp_hidden=2 * dim, conv_hidden=hidden,
                          shift=shift, drop_path=0.0, dtype=np.float64)
        for _, p in blk.named_parameters():
            p.data = rng.standard_normal(p.shape) * 0.5
        blocks.append(blk)
    return blocks[0], blocks[1]


def _named(module, prefix: str) -> Dict[str, Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _block_cases(rng) -> Dict[str, OpCase]:
    cases: Dict[str, OpCase] = {}
    h = w = 4
    blk_w, blk_sw = _tiny_block_pair(rng)
    grid = _randn(rng, (2, h, w, 6))
    tokens = _randn(rng, (2, h * w, 6))

    def probe(f, leaves, name):
        r = Tensor(rng.standard_normal(f().shape))
        cases[name] = (lambda: T.tsum(T.mul(f(), r)), leaves)

    enh = blk_w.enhancer
    probe(lambda: local_feature_enhance(grid, enh),
          {"grid": grid, **_named(enh, "enhancer")}, "local_feature_enhance")
    win = window_partition(Tensor(rng.standard_normal((2, h, w, 6))), 2)
    win = Tensor(win.data, requires_grad=True)
    attn = blk_w.attn
    probe(lambda: window_attention(win, attn), {"windows": win, **_named(attn, "attn")},
          "window_attention")
    mask = build_shift_mask(h, w, 2)
    probe(lambda: window_attention(win, attn, mask), {"windows": win, **_named(attn, "attn")},
          "window_attention_masked")
    probe(lambda: coswin_msa(tokens, h, w, blk_w), {"tokens": tokens, **_named(blk_w, "block")},
          "coswin_msa")
    probe(lambda: coswin_shifted_msa(tokens, h, w, blk_sw),
          {"tokens": tokens, **_named(blk_sw, "block")}, "coswin_shifted_msa")
    probe(lambda: coswin_block_pair(tokens, h, w, blk_w, blk_sw),
          {"tokens": tokens, **_named(blk_w, "w"), **_named(blk_sw, "sw")}, "block_pair")
    return cases


def tiny_model_config(**overrides) -> ModelConfig:
    """An 8x8 two-stage model small enough for exhaustive gradient checks."""
    base = dict(image_size=(8, 8), in_channels=2, patch_size=2, embed_dim=6,
                stage_depths=[2, 2], num_heads=[2, 3], window_size=2, num_classes=3,
                drop_path_max=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def _model_cases(rng) -> Dict[str, OpCase]:
    # Init-scale weights make most gradients tiny enough to sit at the roundoff
    # floor, so the check runs at O(0.3) weights with LN gains around 1.
    model = CoSwinModel(tiny_model_config(), seed=0, dtype=np.float64)
    for name, p in model.named_parameters():
        p.data = rng.standard_normal(p.shape) * 0.3 + (1.0 if name.endswith("gain") else 0.0)
    images = rng.standard_normal((2, 8, 8, 2))
    labels = np.array([0, 2])
    params = dict(model.named_parameters())
    return {"model_loss": (lambda: cross_entropy(model(images), labels), params)}


SCOPES = ("op", "block", "model")


def gradcheck_suite(scope: str = "op", seed: int = 0, eps: float = 1e-4,
                    fault: Optional[Tuple[str, float]] = None,
                    only: Optional[Sequence[str]] = None) -> List[GradCheckReport]:
    """Run every check at ``scope``. ``fault=(op, scale)`` corrupts one backward rule."""
    if scope not in SCOPES:
        raise ContractError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
    rng = make_rng(seed, "gradcheck-suite", scope)
    builders = {"op": _op_cases, "block": _block_cases, "model": _model_cases}
    cases = builders[scope](rng)
    ctx = T.inject_backward_fault(*fault) if fault else contextlib.nullcontext()
    reports = []
    with ctx:
        for name, (fn, leaves) in cases.items():
            if only and name not in only:
                continue
            reports.append(finite_diff_gradcheck(fn, leaves, eps, seed, name))
    return reports


__all__ = [
    "DEFAULT_TOL", "GradCheckReport", "LeafError", "SCOPES", "finite_diff_gradcheck",
    "gradcheck_suite", "tiny_model_config",
]
