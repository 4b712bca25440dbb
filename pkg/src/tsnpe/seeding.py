"""Counter-based seed derivation.

Every random stream in a run is addressed by ``(root_seed, round, phase, row)``
and built with :class:`numpy.random.SeedSequence` spawn keys, so results never
depend on worker count or on the order in which phases execute.
"""

from __future__ import annotations

import numpy as np

# Phase identifiers are part of the on-disk reproducibility contract; never renumber.
PHASES = {
    "proposal": 1,
    "simulate": 2,
    "init": 3,
    "train": 4,
    "coverage": 5,
    "threshold": 6,
    "metrics": 7,
    "pilot": 8,
    "observation": 9,
    "oracle": 10,
}


def phase_id(phase: str | int) -> int:
    if isinstance(phase, int):
        return phase
    return PHASES[phase]


def seed_sequence(root: int, *key: int | str) -> np.random.SeedSequence:
    spawn_key = tuple(phase_id(k) if isinstance(k, str) else int(k) for k in key)
    return np.random.SeedSequence(int(root), spawn_key=spawn_key)


def derive_rng(root: int, *key: int | str) -> np.random.Generator:
    """Generator for the stream ``root/key...``."""
    return np.random.default_rng(seed_sequence(root, *key))


def derive_seed(root: int, *key: int | str) -> int:
    """A 63-bit integer seed for the stream ``root/key...``."""
    return int(seed_sequence(root, *key).generate_state(2, np.uint64)[0] >> np.uint64(1))


def row_rngs(root: int, round_index: int, phase: str | int, n_rows: int,
             offset: int = 0) -> list[np.random.Generator]:
    """One independent generator per batch row."""
    return [derive_rng(root, round_index, phase, offset + i) for i in range(n_rows)]
