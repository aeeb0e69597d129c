"""Counter-based seed derivation so every random draw is addressable by key."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(*keys) -> int:
    """Deterministic 32-bit seed from a tuple of ints/strings."""
    ints = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence([int(i) & 0xFFFFFFFF for i in ints]).generate_state(1)[0])


def source_batch_indices(n_source: int, batch: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_source, size=min(batch, n_source), replace=False))
