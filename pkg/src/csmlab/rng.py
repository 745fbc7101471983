"""Seeded, named random streams on a counter-based generator.

Each (seed, stream path) pair keys an independent Philox generator, so
sub-streams for data generation, initialization, shuffling, dropout and
intervention orders never overlap and stay reproducible regardless of the
order in which other streams are consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    def __init__(self, seed, path="root"):
        self.seed = int(seed)
        self.path = path
        digest = hashlib.sha256(f"{self.seed}|{path}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, name):
        return RngStream(self.seed, f"{self.path}/{name}")

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size=size)

    def bernoulli(self, p, size=None):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli probability {p} outside [0, 1]")
        return (self._gen.random(size) < p).astype(np.float64)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)
