"""Seeded random streams.

Every stream is numpy's counter-based Philox generator keyed by a
``SeedSequence`` built from a 64-bit seed plus integer or string keys, so the
same (seed, keys, call sequence) reproduces on every platform.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "philox4x64"


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_key(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))
