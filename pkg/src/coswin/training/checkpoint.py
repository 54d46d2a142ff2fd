"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"CSWN" | version | json_len | json (UTF-8) | n_records |
    n_records x ( name_len | name (UTF-8) | ndim | dims... | float32 LE data )

The JSON blob holds the model config, train config, epoch, optimizer step
count and RNG state. Optimizer moments are stored as extra records named
``opt.m.<param>`` / ``opt.v.<param>``. There is no compression or checksum;
integrity is left to the filesystem.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from ..exceptions import CheckpointError
from ..model import CoSwinModel, ModelConfig
from .optim import OptimizerState

MAGIC = b"CSWN"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    meta: Dict[str, Any] = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None

    def build_model(self, dtype=np.float32) -> CoSwinModel:
        model = CoSwinModel(self.model_config, seed=int(self.meta.get("seed", 0)), dtype=dtype)
        for name, p in model.named_parameters():
            p.data = self.params[name].astype(dtype)
        return model

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.array(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    raw = name.encode("utf-8")
    parts = [_u32(len(raw)), raw, _u32(arr.ndim)]
    parts += [_u32(d) for d in arr.shape]
    parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: CoSwinModel, meta: Optional[Dict[str, Any]] = None,
                    optimizer: Optional[OptimizerState] = None) -> None:
    blob = dict(meta or {})
    blob["model"] = model.config.to_dict()
    blob.setdefault("seed", model.seed)
    records = [(name, p.data) for name, p in model.named_parameters()]
    if optimizer is not None:
        blob["optimizer_t"] = optimizer.t
        for name, _ in list(records):
            if name in optimizer.m:
                records.append((f"opt.m.{name}", optimizer.m[name]))
                records.append((f"opt.v.{name}", optimizer.v[name]))
    cfg = json.dumps(blob, sort_keys=True).encode("utf-8")
    out = [MAGIC, _u32(VERSION), _u32(len(cfg)), cfg, _u32(len(records))]
    out += [_record(n, a) for n, a in records]
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated file while reading {what} at offset {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _expected_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    probe = CoSwinModel(cfg, seed=0)
    return {name: p.shape for name, p in probe.named_parameters()}


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint; any inconsistency raises :class:`CheckpointError`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} (expected {MAGIC!r})")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    blob_len = r.u32("config length")
    try:
        meta = json.loads(r.take(blob_len, "config blob").decode("utf-8"))
        cfg = ModelConfig.from_dict(meta.pop("model")).validate()
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable config blob: {exc}") from None
    expected = _expected_shapes(cfg)
    count = r.u32("record count")
    params: Dict[str, np.ndarray] = {}
    opt_m: Dict[str, np.ndarray] = {}
    opt_v: Dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"record {i} name length")
        try:
            name = r.take(name_len, f"record {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"record {i}: name is not UTF-8") from None
        ndim = r.u32(f"record {name} ndim")
        if ndim > 8:
            raise CheckpointError(f"record {name}: shape error, ndim {ndim}")
        dims = tuple(r.u32(f"record {name} dim") for _ in range(ndim))
        base = name
        for prefix in ("opt.m.", "opt.v."):
            if name.startswith(prefix):
                base = name[len(prefix):]
        want = expected.get(base)
        if want is None:
            raise CheckpointError(f"record {name}: unknown parameter name")
        if dims != tuple(want):
            raise CheckpointError(f"record {name}: shape error, file has {dims}, config expects {want}")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, f"record {name} data"), dtype="<f4").reshape(dims)
        arr = arr.astype(np.float32)
        if name.startswith("opt.m."):
            opt_m[base] = arr
        elif name.startswith("opt.v."):
            opt_v[base] = arr
        else:
            params[name] = arr
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last record")
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"missing parameter record(s): {', '.join(missing[:5])}")
    optimizer = None
    if "optimizer_t" in meta:
        optimizer = OptimizerState(opt_m, opt_v, int(meta["optimizer_t"]))
    return Checkpoint(cfg, params, meta, optimizer)
