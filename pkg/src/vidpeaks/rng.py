"""Keyed random streams: every draw is addressed by (root seed, keys...)."""
import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.sha256(repr(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def keyed_rng(seed, *keys) -> np.random.Generator:
    """Counter-based Philox stream; independent of call order elsewhere."""
    ss = np.random.SeedSequence([_key_int(seed)] + [_key_int(k) for k in keys])
    return np.random.Generator(np.random.Philox(ss))
