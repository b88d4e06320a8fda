"""Seed streams.

Every random draw flows from one 64-bit run seed. A purpose string picks an
independent Philox stream: its SHA-256 digest supplies the spawn key of a
``SeedSequence`` rooted at the run seed, so streams never depend on the
order in which other streams were consumed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(purpose: str) -> tuple:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Generator for ``purpose`` under run seed ``seed``."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    seq = np.random.SeedSequence(seed, spawn_key=stream_key(purpose))
    return np.random.Generator(np.random.Philox(seq))
