"""Named random streams derived from one master seed.

Each stream is a Philox (counter-based) generator keyed by the master seed and
a SHA-256 digest of the stream name, so e.g. ``"data"``, ``"init/encoder.0.weight"``
and ``"reparam"`` never share draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, *_name_words(name)])
    return np.random.Generator(np.random.Philox(ss))


class RngStreams:
    """Lazily created, cached named streams for one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = self._streams[name] = stream(self.seed, name)
        return gen

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator at the start of ``name`` (not cached)."""
        return stream(self.seed, name)
