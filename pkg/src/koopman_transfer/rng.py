"""Named counter-based random streams.

Every consumer of randomness asks for ``named_rng(seed, "stream-name")``; the
Philox key is derived from both, so streams never overlap and results do not
depend on the order in which streams are created.
"""

import zlib

import numpy as np


def stream_id(name):
    return zlib.crc32(name.encode("utf-8"))


def named_rng(seed, stream):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_id(stream),))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, stream, index):
    """Deterministic 63-bit integer seed for item ``index`` of ``stream``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_id(stream), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
