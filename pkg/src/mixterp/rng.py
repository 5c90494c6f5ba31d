"""Named random sub-streams.

All randomness in a run flows from a single integer seed. Each consumer asks
for a stream by name (and optional integer qualifiers, e.g. an epoch number),
so any component can be re-run in isolation and reproduce its draws exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    # Stable across platforms and Python versions (unlike hash()).
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def named_stream(seed: int, name: str, *qualifiers: int) -> np.random.Generator:
    """Generator for the sub-stream `name` (plus qualifiers) of `seed`."""
    entropy = [int(seed), _name_key(name), *[int(q) for q in qualifiers]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
