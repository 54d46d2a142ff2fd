"""Command-line entry point: ``coswin <command> [options]``.

Exit codes: 0 success, 1 failed check, 2 config error, 3 I/O or data
error, 4 checkpoint or format error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import RunConfig, load_run_config
from .data import Dataset, load_dataset
from .exceptions import CheckpointError, ConfigError, DataError, FormatError, TrainingError
from .model import CoSwinModel
from .saliency import load_image, saliency_map, write_pgm
from .training import evaluate, load_checkpoint, train

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4

log = logging.getLogger("coswin")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _check_fits(cfg, ds: Dataset, error=ConfigError) -> None:
    expected = (*cfg.image_size, cfg.in_channels)
    if ds.shape != expected:
        raise error(f"dataset {ds.name}/{ds.split} has image shape {ds.shape}, "
                    f"model expects {expected}")
    if ds.num_classes > cfg.num_classes:
        raise error(f"dataset has {ds.num_classes} classes, model head has {cfg.num_classes}")


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config).with_overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        old = cfg.train.epochs
        cfg.train.epochs = args.epochs
        if old and cfg.train.warmup_epochs:
            cfg.train.warmup_epochs = cfg.train.warmup_epochs * args.epochs / old
    if getattr(args, "subset", None) is not None:
        cfg.data.train_subset = args.subset
    return cfg.validate()


def _load_splits(cfg: RunConfig, data_dir, need_test: bool = True):
    train_set = load_dataset(cfg.data, data_dir, "train", cfg.train.seed)
    test_set = load_dataset(cfg.data, data_dir, "test", cfg.train.seed) if need_test else None
    _check_fits(cfg.model, train_set)
    return train_set, test_set


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve(args)
    train_set, test_set = _load_splits(cfg, args.data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    model = CoSwinModel(cfg.model, seed=cfg.train.seed)
    meta = {"run": cfg.to_dict(),
            "data_stats": {"mean": list(train_set.mean), "std": list(train_set.std)}}
    result = train(model, train_set, cfg.train, test_set, out, cfg.data.augment_flags(),
                   extra_meta=meta)
    last = result.history[-1] if result.history else None
    _emit({"command": "train", "epochs": cfg.train.epochs, "steps": result.steps,
           "train_loss": last.train_loss if last else None,
           "test_acc": last.test_acc if last else None, "best_test_acc": result.best_acc,
           "out": str(out)})
    return EXIT_OK


def _checkpoint(path):
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model()


def _run_config_for(ckpt, config_arg: Optional[str]) -> RunConfig:
    if config_arg:
        return load_run_config(config_arg)
    run = ckpt.meta.get("run")
    if run is None:
        raise ConfigError("checkpoint carries no run config; pass --config")
    return RunConfig.from_dict(run)


def cmd_eval(args) -> int:
    ckpt, model = _checkpoint(args.checkpoint)
    run = _run_config_for(ckpt, args.config)
    ds = load_dataset(run.data, args.data_dir, args.split, run.train.seed)
    _check_fits(ckpt.model_config, ds, CheckpointError)
    acc, loss = evaluate(model, ds)
    print(f"{args.split}: top-1 {acc:.4f}  loss {loss:.4f}  (n={len(ds)})")
    _emit({"command": "eval", "split": args.split, "top1": acc, "loss": loss, "n": len(ds)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verification import DEFAULT_TOL, gradcheck_suite

    fault = None
    if args.inject_fault:
        op, _, scale = args.inject_fault.partition(":")
        fault = (op, float(scale) if scale else 1.5)
    reports = gradcheck_suite(args.scope, args.seed, fault=fault)
    failed = [r for r in reports if not r.passed(DEFAULT_TOL)]
    for r in reports:
        print(("ok    " if r.passed(DEFAULT_TOL) else "FAIL  ") + r.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"gradcheck_{args.scope}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "leaf", "max_rel_error", "argmax", "checked", "eps", "passed"])
            for r in reports:
                for leaf, e in r.entries.items():
                    w.writerow([r.name, leaf, repr(e.max_rel_error), list(e.argmax), e.checked,
                                r.eps, int(e.max_rel_error < DEFAULT_TOL)])
    _emit({"command": "gradcheck", "scope": args.scope, "checks": len(reports),
           "failed": [r.name for r in failed],
           "max_rel_error": max(r.max_error for r in reports)})
    return EXIT_ASSERT if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .verification import run_ablation

    cfg = _resolve(args)
    train_set, test_set = _load_splits(cfg, args.data_dir)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    try:
        report = run_ablation(train_set, test_set, cfg.model, cfg.train, variants, seeds,
                              args.out, cfg.data.augment_flags())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(report.markdown())
    if not report.counts_match():
        print("parameter counts disagree with the closed form", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_saliency(args) -> int:
    ckpt, model = _checkpoint(args.checkpoint)
    mc = ckpt.model_config
    if args.image:
        image = load_image(args.image, mc.image_size, mc.in_channels)
        stats = ckpt.meta.get("data_stats")
        if stats:
            image = (image - np.asarray(stats["mean"], np.float32)) / np.asarray(stats["std"],
                                                                                 np.float32)
    else:
        run = _run_config_for(ckpt, args.config)
        ds = load_dataset(run.data, args.data_dir, args.split, run.train.seed)
        _check_fits(mc, ds, CheckpointError)
        if not 0 <= args.index < len(ds):
            raise DataError(f"--index {args.index} outside [0, {len(ds)})")
        image = ds.normalize(ds.images[args.index:args.index + 1])[0]
    sal, cls = saliency_map(model, image.astype(model.dtype))
    write_pgm(args.out, sal)
    _emit({"command": "saliency", "class": cls, "out": str(args.out),
           "height": int(sal.shape[0]), "width": int(sal.shape[1])})
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .verification import closed_form_param_count

    ckpt, model = _checkpoint(args.checkpoint)
    print("config:", json.dumps(ckpt.model_config.to_dict(), sort_keys=True))
    print(f"epoch: {ckpt.epoch}")
    for name, p in model.named_parameters():
        print(f"  {name:60s} {list(p.shape)}")
    gammas = [float(e.gamma.data) for e in model.enhancers()]
    total = model.num_parameters()
    print(f"total parameters: {total:,} (closed form {closed_form_param_count(model.config):,})")
    print("gamma:", " ".join(f"{g:.6g}" for g in gammas) if gammas else "(none)")
    _emit({"command": "inspect", "parameters": total, "gamma": gammas})
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = load_run_config(args.config).with_overrides(args.set or [])
    cfg.data.train_subset = cfg.data.test_subset = None
    for split in ("train", "test"):
        ds = load_dataset(cfg.data, args.data_dir, split)
        counts = np.bincount(ds.labels, minlength=ds.num_classes).tolist()
        _emit({"split": split, "dataset": ds.name, "n": len(ds), "shape": list(ds.shape),
               "class_counts": counts})
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coswin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp, required=True):
        sp.add_argument("--config", required=required,
                        help="run config JSON (path or bundled name)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config field; repeatable")

    t = sub.add_parser("train", help="train a model")
    config_args(t)
    t.add_argument("--data-dir", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--subset", type=int, help="use the first N training samples")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", default=None)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--config", help="run config when the checkpoint carries none")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scope", choices=("op", "block", "model"), default="op")
    g.add_argument("--out", help="directory for the CSV report")
    g.add_argument("--inject-fault", help=argparse.SUPPRESS)
    g.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train variants a-d and tabulate")
    config_args(a)
    a.add_argument("--data-dir", default=None)
    a.add_argument("--variants", default="a,b,c,d")
    a.add_argument("--seeds", default="0")
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int)
    a.add_argument("--subset", type=int)
    a.set_defaults(fn=cmd_ablate, seed=None)

    s = sub.add_parser("saliency", help="export a Grad-CAM map as PGM")
    s.add_argument("--checkpoint", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--index", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--data-dir", default=None)
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_saliency)

    i = sub.add_parser("inspect", help="print checkpoint contents")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=cmd_inspect)

    st = sub.add_parser("stats", help="print dataset split sizes and class counts")
    config_args(st)
    st.add_argument("--data-dir", default=None)
    st.set_defaults(fn=cmd_stats)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
