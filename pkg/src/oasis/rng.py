"""Seeded random streams.

Every stochastic step draws from a Philox counter-based generator keyed by
``(master_seed, *labels)``.  Philox streams with distinct keys are
statistically independent, so per-cluster and per-repeat streams can be
derived without coordination and in any execution order.
"""

import hashlib

import numpy as np

__all__ = ["make_rng", "stream_key", "derive_seed"]

ALGORITHM = "Philox4x64-10"


def stream_key(*labels):
    """Map a tuple of ints/strings to a stable list of 32-bit words."""
    words = []
    for label in labels:
        if isinstance(label, (int, np.integer)):
            value = int(label)
            if value < 0:
                raise ValueError("stream labels must be non-negative")
            words.extend([value & 0xFFFFFFFF, value >> 32 & 0xFFFFFFFF])
        else:
            digest = hashlib.sha256(str(label).encode()).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return words


def make_rng(seed, *labels):
    """Return a Generator for the stream identified by ``seed`` and ``labels``."""
    seq = np.random.SeedSequence([*stream_key(int(seed)), *stream_key(*labels)])
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed, *labels):
    """A 63-bit integer seed for the stream ``(seed, *labels)``."""
    return int(make_rng(seed, *labels).integers(0, 2**63 - 1))
