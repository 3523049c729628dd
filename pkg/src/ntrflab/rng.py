"""Reproducible random streams.

Uniform bits come from numpy's Philox (a counter-based generator keyed by a
SeedSequence); normals are produced by the polar Box-Muller transform written
out here so the draw sequence depends only on the Philox output, never on
numpy's internal normal sampler.
"""

from __future__ import annotations

import numpy as np


class Stream:
    """A keyed random stream: ``Stream(seed, *coords)`` is a distinct substream
    for every coordinate tuple, e.g. ``Stream(master, n, m, rep)`` for a grid cell."""

    def __init__(self, seed: int, *coords: int):
        key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(c) for c in coords]
        self.key = tuple(key)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniformly without replacement."""
        return self._gen.permutation(n)[:k]

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        total = int(np.prod(shape, dtype=np.int64))
        out = np.empty(total)
        filled = 0
        while filled < total:
            need = total - filled
            # acceptance rate of the polar method is pi/4
            pairs = int(need / 2 / 0.78) + 16
            u = self._gen.random((pairs, 2)) * 2.0 - 1.0
            s = u[:, 0] ** 2 + u[:, 1] ** 2
            ok = (s > 0.0) & (s < 1.0)
            u, s = u[ok], s[ok]
            z = (u * np.sqrt(-2.0 * np.log(s) / s)[:, None]).ravel()
            take = min(need, z.size)
            out[filled:filled + take] = z[:take]
            filled += take
        return out.reshape(shape)

    def unit_vectors(self, k: int, d: int) -> np.ndarray:
        z = self.normal((k, d))
        return z / np.linalg.norm(z, axis=1, keepdims=True)
