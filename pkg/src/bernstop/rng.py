"""Reproducible random streams.

Every simulated process gets its own counter-based Philox stream keyed by
``(seed, stream)``, so results do not depend on how work is split across
threads or on the order in which processes are simulated.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= _MASK64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return seed


def stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for process ``index`` under ``seed``."""
    seed = check_seed(seed)
    index = int(index)
    if not 0 <= index <= _MASK64:
        raise ValueError("stream index must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(key=(index << 64) | seed))


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a sub-experiment (e.g. run number) of ``seed``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
