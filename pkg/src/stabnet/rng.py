"""Named, independently seeded random streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ParameterError


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStreams:
    """Expands a master seed into independent ``numpy`` generators keyed by name.

    ``get(name)`` returns the same generator object on every call, so draws
    continue where the previous call left off. ``fresh(name, *keys)`` builds a
    new generator for a fully specified coordinate (e.g. epoch, sample, replica),
    which is what makes a draw independent of batch composition.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ParameterError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._cache: dict[str, np.random.Generator] = {}

    def _seq(self, name: str, keys: tuple[int, ...]) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(_key(name), *(int(k) for k in keys)))

    def get(self, name: str) -> np.random.Generator:
        gen = self._cache.get(name)
        if gen is None:
            gen = np.random.Generator(np.random.PCG64(self._seq(name, ())))
            self._cache[name] = gen
        return gen

    def fresh(self, name: str, *keys: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._seq(name, keys)))

    def derive_seed(self, name: str, *keys: int) -> int:
        """A 63-bit integer seed for ``name`` at ``keys``, stable across platforms."""
        state = self._seq(name, keys).generate_state(2, dtype=np.uint32)
        return int((int(state[0]) << 31) ^ int(state[1]))
