"""Deterministic random streams.

Every random decision in the package is drawn from a Philox4x64-10
counter-based generator whose 128-bit key is derived from the master seed
and an integer path, e.g. ``stream(seed, STREAM_SHUFFLE, round_idx,
client_id)``.  Keys are produced by folding the path through splitmix64, so
independent streams never share state and any run can be replayed from its
seed alone.  Both splitmix64 and Philox are published algorithms with
implementations in every mainstream language, which keeps the streams
reproducible outside this codebase.
"""

from __future__ import annotations

import numpy as np

# Stream namespaces.  Values are part of the reproducibility contract:
# changing them changes every derived stream.
STREAM_TASKS = 1
STREAM_CLIENT_DATA = 2
STREAM_TEST_DATA = 3
STREAM_MODEL_INIT = 4
STREAM_SELECT = 5
STREAM_ASSIGN = 6
STREAM_SHUFFLE = 7

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 step: maps a 64-bit state to a well-mixed 64-bit value."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_key(master_seed: int, *path: int) -> tuple[int, int]:
    """Fold (master_seed, *path) into a 2x64-bit Philox key."""
    acc = splitmix64(master_seed & _MASK)
    for part in path:
        acc = splitmix64((acc ^ (part & _MASK)) & _MASK)
    return acc, splitmix64(acc)


def derive_seed(master_seed: int, *path: int) -> int:
    """Fold a path into a single 64-bit seed for handing to components."""
    return derive_key(master_seed, *path)[0]


def stream(master_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the sub-task named by ``path``."""
    return np.random.Generator(np.random.Philox(key=np.array(derive_key(master_seed, *path), dtype=np.uint64)))
