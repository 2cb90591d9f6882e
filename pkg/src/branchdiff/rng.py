"""Deterministic random-number substreams.

All randomness in a run flows from a single 64-bit seed. Independent
consumers (training, sampling, discovery, per-class chains...) get their own
generator derived from the seed plus a tuple of string/int tags, so adding a
consumer never perturbs the draws seen by existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_words(tag: str | int) -> list[int]:
    # Stable across processes (unlike hash()).
    if isinstance(tag, int):
        return [tag & _MASK64]
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return [int.from_bytes(digest, "little")]


def substream(seed: int, *tags: str | int) -> np.random.Generator:
    """Generator for the substream named by ``tags`` under ``seed``."""
    words: list[int] = [int(seed) & _MASK64]
    for tag in tags:
        words.extend(_tag_words(tag))
    return np.random.default_rng(np.random.SeedSequence(words))
