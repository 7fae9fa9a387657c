"""Seed fan-out: one master seed, independent named substreams.

Every source of randomness in a run (parameter init, mask draws, environment
resets, exploration, replay sampling) pulls from its own named substream so
that changing one consumer (e.g. the sharing mode) never perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_words(tags) -> list[int]:
    words = []
    for t in tags:
        if isinstance(t, (int, np.integer)):
            words.append(int(t) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(t).encode("utf-8")))
    return words


def substream_sequence(master_seed: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed)] + _tag_words(tags))


def substream(master_seed: int, *tags) -> np.random.Generator:
    """Generator for the substream named by ``tags`` under ``master_seed``."""
    return np.random.default_rng(substream_sequence(master_seed, *tags))


def substream_seed(master_seed: int, *tags) -> int:
    """A plain integer seed derived from the named substream (for APIs that
    take seeds rather than generators)."""
    return int(substream_sequence(master_seed, *tags).generate_state(1)[0])
