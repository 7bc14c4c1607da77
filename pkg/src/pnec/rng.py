"""Counter-based random streams with explicit, order-independent splitting.

A stream is identified by ``(seed, *path)``; the path items (ints or strings)
are hashed into a SeedSequence whose state becomes a Philox-4x64 key. Stream
``(seed, "problem", 7)`` is the same no matter how many other streams exist.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10 keyed by SeedSequence(seed, sha256-path)"

_MASK64 = (1 << 64) - 1


def _word(item) -> int:
    if isinstance(item, (int, np.integer)):
        return int(item) & _MASK64
    return int.from_bytes(hashlib.sha256(str(item).encode()).digest()[:8], "little")


def derive_key(seed: int, *path) -> np.ndarray:
    ss = np.random.SeedSequence([_word(seed)] + [_word(p) for p in path])
    return ss.generate_state(2, np.uint64)


def make_rng(seed: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *path)))
