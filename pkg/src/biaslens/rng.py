"""Seedable, splittable random streams.

Every component draws randomness through an RngStream so a single integer
seed pins down dataset generation, parameter init, batch order and sampling.
Streams are addressed by a path of names; the underlying generator is
Philox4x64 (counter-based), keyed by sha256(seed, path), so results are
reproducible across platforms and independent of the order in which sibling
streams are consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(seed: int, path: str) -> int:
    digest = hashlib.sha256(f"{seed}|{path}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """A named Philox stream, splittable into independent child streams."""

    def __init__(self, seed: int, path: str = "root"):
        self.seed = int(seed)
        self.path = path
        self.gen = np.random.Generator(np.random.Philox(key=_stream_key(self.seed, path)))

    def split(self, name: str | int) -> "RngStream":
        """Derive an independent child stream keyed by `name`."""
        return RngStream(self.seed, f"{self.path}/{name}")

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size=size)

    def normal(self, size=None, scale=1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)
