"""Deterministic seed splitting.

A run seed (any non-negative 64-bit int) is combined with a tuple of string
labels. Each label is hashed with SHA-256 and the first 8 bytes (little
endian) become one word of the numpy ``SeedSequence`` spawn key, so
``generator(seed, "net", "down1")`` is independent of
``generator(seed, "latent")`` and never touches ambient entropy.
"""
import hashlib

import numpy as np


def label_word(label: str) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def generator(seed: int, *labels: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(label_word(x) for x in labels))
    return np.random.Generator(np.random.PCG64(ss))
