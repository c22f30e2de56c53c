"""Counter-based, splittable random streams.

A stream is identified by a 256-bit key derived from the root seed and the
chain of child labels. Children are independent of draw order, so a single
seed reproduces a whole run no matter which parts of it execute first.
Backed by numpy's Philox bit generator (itself counter-based).
"""

from __future__ import annotations

import hashlib

import numpy as np


class RandomStream:
    """A keyed random stream with deterministic, label-addressed children."""

    def __init__(self, seed: int | bytes):
        if isinstance(seed, bytes):
            self._key = seed
        else:
            self._key = hashlib.sha256(b"focusrank-root:%d" % int(seed)).digest()
        self._generator: np.random.Generator | None = None

    def child(self, *labels) -> "RandomStream":
        """Derive an independent stream keyed by this stream plus `labels`."""
        h = hashlib.sha256(self._key)
        for label in labels:
            h.update(b"/")
            h.update(str(label).encode("utf-8"))
        return RandomStream(h.digest())

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            key = int.from_bytes(self._key[:16], "little")
            self._generator = np.random.Generator(np.random.Philox(key=key))
        return self._generator

    # Convenience draw methods; draws within one stream are sequential.
    def normal(self, shape, scale=1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def gumbel(self, shape) -> np.ndarray:
        return self.generator.gumbel(0.0, 1.0, size=shape)

    def integers(self, low, high, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)
