"""Seeded counter-based random streams.

All initialization and sampling in the package draws from Philox
generators keyed by a hash of (seed, stream labels). Philox is
counter-based, so the same key yields the same sequence on any platform,
and independent labels give statistically independent streams without
any shared mutable state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *stream) -> np.ndarray:
    """Stable 128-bit Philox key from a seed and stream labels."""
    text = repr((int(seed),) + tuple(str(s) for s in stream))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def generator(seed: int, *stream) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *stream)))
