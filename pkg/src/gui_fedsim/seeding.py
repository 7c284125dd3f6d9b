"""Stable seed derivation. No global RNG is ever touched."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str, *indices) -> int:
    """64-bit seed from ``(master, label, indices)`` via blake2b.

    Stable across processes, platforms and Python hash randomization.
    """
    key = "|".join([str(int(master)), label, *(str(i) for i in indices)])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(master: int, label: str, *indices) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label, *indices))
