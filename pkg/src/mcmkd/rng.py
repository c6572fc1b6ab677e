"""Seed derivation and counter-based random streams.

All randomness flows from one root seed. A stream for a particular purpose
is addressed by a path such as ``(root, "slide", 17)``: the path is hashed
with BLAKE2b into the 128-bit key of numpy's Philox4x64-10 generator, so
streams are independent of the order in which they are created.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def _encode(part) -> bytes:
    if isinstance(part, str):
        raw = part.encode()
        return b"s" + struct.pack("<I", len(raw)) + raw
    if isinstance(part, (int, np.integer)):
        return b"i" + struct.pack("<Q", int(part) & MASK64)
    raise TypeError(f"seed path parts must be int or str, got {type(part).__name__}")


def derive_key(root: int, *path) -> np.ndarray:
    """Philox key (2 x uint64) for ``(root, *path)``."""
    h = hashlib.blake2b(digest_size=16, person=b"mcmkd-rng")
    for part in (root, *path):
        h.update(_encode(part))
    return np.frombuffer(h.digest(), dtype="<u8").astype(np.uint64)


def derive_seed(root: int, *path) -> int:
    """A 64-bit integer seed for ``(root, *path)``."""
    return int(derive_key(root, *path)[0])


def stream(root: int, *path) -> np.random.Generator:
    key = derive_key(root, *path)
    return np.random.Generator(np.random.Philox(key=key))
