"""Seeded random streams and parameter initializers.

Streams are numpy ``Generator`` objects over the Philox 4x64 counter-based
bit generator, keyed through ``SeedSequence`` so that a (seed, key...) tuple
always yields the same stream on every platform.
"""
from __future__ import annotations

import zlib
from typing import Sequence, Union

import numpy as np

from .engine import Tensor

Key = Union[int, str]


def _key_entropy(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Independent deterministic stream for ``seed`` and an optional key path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_entropy(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def trunc_normal(shape: Sequence[int], std: float, rng: np.random.Generator,
                 dtype=np.float32, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound*std."""
    out = rng.standard_normal(size=tuple(shape))
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


def trunc_normal_tensor(shape, std: float, rng: np.random.Generator, dtype=np.float32,
                        name=None) -> Tensor:
    return Tensor(trunc_normal(shape, std, rng, dtype), requires_grad=True, name=name)


def constant_tensor(shape, value: float, dtype=np.float32, name=None,
                    requires_grad: bool = True) -> Tensor:
    return Tensor(np.full(tuple(shape), value, dtype=dtype), requires_grad=requires_grad, name=name)
