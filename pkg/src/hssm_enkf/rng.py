"""Counter-based random streams.

Every stochastic unit of work (a replication, an MCMC iteration, ...) gets its
own Philox stream keyed by a tuple of integers, so results do not depend on
the order or the number of workers that execute the units.
"""

import zlib

import numpy as np


def _key_int(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def stream(seed, *keys):
    """Independent generator for ``(seed, *keys)``.

    String keys are hashed with CRC32, so ``stream(1, "table2", 3)`` is stable
    across interpreter runs.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def child_seed(rng):
    """Draw an integer seed from ``rng`` for a derived stream."""
    return int(rng.integers(0, 2**63 - 1))
