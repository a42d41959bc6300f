"""Named, reproducible random streams derived from a single master seed."""
import zlib

import numpy as np


def _key(name):
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def seed_sequence(seed, *names):
    """SeedSequence for the stream ``names`` under master ``seed``.

    Streams with different names are statistically independent; the same
    (seed, names) pair always yields the same stream.
    """
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))


def stream(seed, *names):
    """Counter-based (Philox) generator for a named stream."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *names)))


def derive_seed(seed, *names):
    """A 63-bit integer seed for a named sub-stream, e.g. per trial."""
    return int(seed_sequence(seed, *names).generate_state(1, np.uint64)[0] >> np.uint64(1))
