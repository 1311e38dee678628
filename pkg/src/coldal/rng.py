"""Counter-based randomness keyed by tuples, so results never depend on call order."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit seed determined by ``seed`` and the key path."""
    ss = np.random.SeedSequence(entropy=_key_int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=_key_int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
