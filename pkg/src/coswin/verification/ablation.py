"""Component ablation harness (variants a-d)."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..data import AugmentFlags, Dataset
from ..exceptions import CoSwinError
from ..model import CoSwinModel, ModelConfig
from ..training import TrainConfig, evaluate, train
from .oracles import closed_form_param_count

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationVariant:
    tag: str
    conv1_enabled: bool
    conv2_enabled: bool
    gamma_enabled: bool


ABLATION_VARIANTS: Dict[str, AblationVariant] = {
    "a": AblationVariant("a", False, False, False),
    "b": AblationVariant("b", True, True, False),
    "c": AblationVariant("c", True, False, True),
    "d": AblationVariant("d", True, True, True),
}

CSV_COLUMNS = ("variant", "seed", "conv1", "conv2", "influence_weight", "params",
               "closed_form_params", "final_train_loss", "test_acc", "error")


@dataclass
class AblationRow:
    variant: str
    seed: int
    params: int
    closed_form_params: int
    final_train_loss: Optional[float] = None
    test_acc: Optional[float] = None
    error: Optional[str] = None


@dataclass
class AblationReport:
    rows: List[AblationRow] = field(default_factory=list)

    def for_variant(self, tag: str) -> List[AblationRow]:
        return [r for r in self.rows if r.variant == tag]

    def variants(self) -> List[str]:
        seen: List[str] = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def counts_match(self) -> bool:
        return all(r.params == r.closed_form_params for r in self.rows)

    def d_minus_a(self) -> Dict[int, Optional[float]]:
        """Per-seed test-accuracy delta of the full model over the plain one."""
        a = {r.seed: r.test_acc for r in self.for_variant("a")}
        d = {r.seed: r.test_acc for r in self.for_variant("d")}
        return {s: (d[s] - a[s] if d[s] is not None and a[s] is not None else None)
                for s in sorted(set(a) & set(d))}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                v = ABLATION_VARIANTS[r.variant]
                w.writerow([r.variant, r.seed, int(v.conv1_enabled), int(v.conv2_enabled),
                            int(v.gamma_enabled), r.params, r.closed_form_params,
                            "" if r.final_train_loss is None else repr(r.final_train_loss),
                            "" if r.test_acc is None else repr(r.test_acc), r.error or ""])

    def markdown(self) -> str:
        mark = {True: "✓", False: "✗"}
        full = [r.test_acc for r in self.for_variant("d") if r.test_acc is not None]
        ref = float(np.mean(full)) if full else None
        lines = ["| Variant | Convolution-1 | Convolution-2 | Influence Weight | Params "
                 "| Top-1 (%) | Δ vs d |",
                 "|---|---|---|---|---|---|---|"]
        for tag in self.variants():
            v = ABLATION_VARIANTS[tag]
            rows = self.for_variant(tag)
            accs = [r.test_acc for r in rows if r.test_acc is not None]
            acc = f"{100 * np.mean(accs):.2f}" if accs else "error"
            delta = ""
            if accs and ref is not None and tag != "d":
                delta = f"{100 * (np.mean(accs) - ref):+.2f}"
            lines.append(f"| {tag} | {mark[v.conv1_enabled]} | {mark[v.conv2_enabled]} | "
                         f"{mark[v.gamma_enabled]} | {rows[0].params:,} | {acc} | {delta} |")
        deltas = self.d_minus_a()
        if deltas:
            lines += ["", "Per-seed test top-1 delta, d minus a (reported, not asserted):", ""]
            for seed, dl in deltas.items():
                lines.append(f"- seed {seed}: " + ("n/a" if dl is None else f"{100 * dl:+.2f} pp"))
        errors = [r for r in self.rows if r.error]
        if errors:
            lines += ["", "Errors:", ""]
            lines += [f"- {r.variant}/seed {r.seed}: {r.error}" for r in errors]
        return "\n".join(lines) + "\n"


def run_ablation(train_set: Dataset, test_set: Dataset, base_cfg: ModelConfig,
                 train_cfg: TrainConfig, variants: Sequence[str] = ("a", "b", "c", "d"),
                 seeds: Sequence[int] = (0,), out_dir=None,
                 augment: Optional[AugmentFlags] = None) -> AblationReport:
    """Train every variant for every seed under the same data order and step budget.

    A failure in one run is recorded on its row and the rest continue.
    """
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variant(s): {', '.join(unknown)}")
    out = Path(out_dir) if out_dir is not None else None
    report = AblationReport()
    for tag in variants:
        cfg = base_cfg.replace(variant=tag)
        for seed in seeds:
            model = CoSwinModel(cfg, seed=seed)
            row = AblationRow(tag, seed, model.num_parameters(), closed_form_param_count(cfg))
            tcfg = dataclasses.replace(train_cfg, seed=seed)
            run_dir = out / f"{tag}_seed{seed}" if out is not None else None
            try:
                result = train(model, train_set, tcfg, None, run_dir, augment)
                row.final_train_loss = result.history[-1].train_loss if result.history else None
                row.test_acc, _ = evaluate(model, test_set)
            except (CoSwinError, FloatingPointError) as exc:
                row.error = f"{type(exc).__name__}: {exc}"
                log.warning("variant %s seed %d failed: %s", tag, seed, exc)
            report.rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "ablation.csv")
        (out / "ablation.md").write_text(report.markdown(), encoding="utf-8")
    return report


__all__ = ["ABLATION_VARIANTS", "AblationReport", "AblationRow", "AblationVariant",
           "CSV_COLUMNS", "run_ablation"]
