"""Seedable cryptographic randomness (AES-128 in counter mode)."""

from __future__ import annotations

import hashlib
import os

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .ring import Ring


def _key_from(seed) -> bytes:
    if seed is None:
        return os.urandom(16)
    if isinstance(seed, (bytes, bytearray)):
        material = bytes(seed)
    elif isinstance(seed, str):
        material = seed.encode()
    else:
        material = int(seed).to_bytes(32, "little", signed=True)
    return hashlib.sha256(b"ppids-rng\x00" + material).digest()[:16]


def derive_seed(seed, *labels) -> bytes:
    """Deterministic child seed for a labelled sub-stream."""
    h = hashlib.sha256(_key_from(seed))
    for label in labels:
        h.update(b"\x00" + str(label).encode())
    return h.digest()


class Rng:
    """Byte stream from AES-CTR; ``Rng(None)`` draws a fresh OS key."""

    def __init__(self, seed=None):
        self._enc = Cipher(algorithms.AES(_key_from(seed)), modes.CTR(b"\x00" * 16)).encryptor()

    def bytes(self, n: int) -> bytes:
        return self._enc.update(b"\x00" * n)

    def words(self, count: int, dtype=np.uint64) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.bytes(count * dt.itemsize), dtype=dt).copy()

    def ring(self, shape, ring: Ring) -> np.ndarray:
        shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(d) for d in shape)
        n = int(np.prod(shape, dtype=np.int64))
        return ring.wrap(self.words(n, ring.dtype)).reshape(shape)

    def seeds(self, n: int) -> np.ndarray:
        """n uniform 128-bit seeds as an (n, 2) uint64 array."""
        return self.words(2 * n).reshape(n, 2)

    def below(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform in [0, bound); bound <= 2**63."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        out = np.empty(0, dtype=np.uint64)
        limit = (1 << 64) - ((1 << 64) % bound)
        while out.size < n:
            w = self.words(2 * (n - out.size) + 8)
            if limit < (1 << 64):
                w = w[w < np.uint64(limit)]
            out = np.concatenate([out, w % np.uint64(bound)])
        return out[:n]
