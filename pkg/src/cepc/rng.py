"""Labeled deterministic random streams.

Every stochastic stage derives its own stream from (seed, label), so runs
replay bit-for-bit and stages can be recomputed in isolation. Labels compose
hierarchically with '/'.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    label: str = "root"

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def generator(self) -> np.random.Generator:
        # sha256 keeps the (seed, label) -> state map stable across
        # platforms and numpy versions; PCG64 draw sequences are portable.
        digest = hashlib.sha256(f"{self.seed}|{self.label}".encode("utf-8")).digest()
        entropy = int.from_bytes(digest, "little")
        return np.random.Generator(np.random.PCG64(entropy))
