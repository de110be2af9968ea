"""Named, splittable random streams.

Every stochastic operation takes an explicit :class:`RngStream`. A stream is
identified by a root seed plus a path of names; children are derived from the
path, not from how much randomness the parent has consumed, so adding a new
consumer never perturbs existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class RngStream:
    """Counter-based (Philox) generator addressed by ``seed`` and a name path."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *names) -> "RngStream":
        return RngStream(self.seed, self.path + names)

    def normal(self, shape, std=1.0, dtype=np.float64):
        out = self.generator.standard_normal(shape, dtype=np.float64 if dtype != np.float32 else np.float32)
        if std != 1.0:
            out *= std
        return out.astype(dtype, copy=False)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self.generator.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={'/'.join(map(str, self.path))})"
