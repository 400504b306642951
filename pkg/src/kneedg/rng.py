"""Deterministic labeled random streams.

Every source of randomness in the package draws from an RngStream, which is
a counter-based generator keyed by (master seed, label). Streams with
distinct labels are statistically independent, so concurrent jobs (folds,
models, seeds) cannot perturb each other's draws, and the same (seed, label)
pair replays identically on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> list[int]:
    # Stable 128-bit digest of the label, split into 32-bit words for
    # SeedSequence entropy. hash() is salted per-process; hashlib is not.
    digest = hashlib.sha256(label.encode("utf-8")).digest()[:16]
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class RngStream:
    """A named, replayable random stream derived from a 64-bit master seed.

    Child streams (``stream.child("gin")``) extend the label path, so any
    component can carve out private randomness without coordinating counters
    with the rest of the program.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = label
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *_label_words(label)])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str) -> "RngStream":
        """Derive an independent stream labeled ``<this label>/<label>``."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r})"
