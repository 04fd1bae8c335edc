"""
Seeded random streams.

Every stream is numpy's Philox4x64-10 (a 64-bit counter-based generator) keyed
by a 128-bit integer: the low word is the run seed, the high word is the
MurmurHash3 x64_128 first word of a "/"-joined stream label. Labels name the
consumer ("split", "expert/CWE-399", "attack/mhm/<sample id>", ...) so that two
consumers never share a stream and per-sample streams are independent of
processing order. The constants are published in docs/format.md.
"""

import mmh3
import numpy as np

MASK64 = (1 << 64) - 1
STREAM_HASH_SEED = 0x5EED


def stream_key(seed, *labels):
    """128-bit Philox key for the stream named by ``labels`` under ``seed``."""
    label = "/".join(str(part) for part in labels)
    word = mmh3.hash64(label.encode("utf-8"), seed=STREAM_HASH_SEED, signed=False)[0]
    return (word << 64) | (int(seed) & MASK64)


def make_rng(seed, *labels):
    """Return an independent ``numpy.random.Generator`` for one named consumer."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))


def derive_seed(seed, *labels):
    """A 63-bit integer seed for a sub-run (e.g. one expert's training)."""
    return int(stream_key(seed, int(seed), *labels) >> 65)
