"""Seed splitting.

Every random draw in the package comes from ``stream(seed, purpose)``: a
Philox generator whose 128-bit key is the SHA-256 digest of
``"<seed>/<purpose>"``. Streams for different purposes are independent, and a
stream can be replayed by anyone who knows the seed and the purpose string.
"""

import hashlib

import numpy as np


def derive_key(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{purpose}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, purpose)))
