"""Deterministic, name-keyed random number generation.

Every random draw in the package comes from a counter-based Philox stream
keyed by ``(seed, *names)``, where names are short strings such as a study
id or a purpose tag ("features", "init", "shuffle").  There is no global
RNG state, so generation order never depends on iteration order or
parallelism, and any stream can be re-opened independently.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _digest_words(parts: tuple[str, ...]) -> list[int]:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    d = h.digest()
    return [int.from_bytes(d[i : i + 8], "little") for i in range(0, 32, 8)]


def keyed_rng(seed: int, *names: str) -> np.random.Generator:
    """Return a Generator for the stream identified by (seed, *names)."""
    w = _digest_words(tuple(names))
    bits = np.random.Philox(key=[int(seed) & _MASK64, w[0]],
                            counter=[w[1], w[2], w[3], 0])
    return np.random.Generator(bits)
