"""Reproducible random streams keyed by ``(master seed, purpose, trial)``.

Every random draw in an experiment comes from a generator derived from the
master seed and a fixed key, never from a shared sequential stream.  Results
are therefore independent of the order in which trials run and of how many
worker processes execute them.
"""

from __future__ import annotations

import numpy as np

# stable integer codes; never renumber, only append
PURPOSES = {
    "plan": 0,
    "theta": 1,
    "noise": 2,
    "excitation": 3,
    "instance": 4,
}

SCHEME = "numpy SeedSequence(entropy=seed, spawn_key=(purpose, *indices)) -> PCG64"


def purpose_code(purpose: str) -> int:
    try:
        return PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown RNG purpose {purpose!r}; known: {sorted(PURPOSES)}") from None


def seed_sequence(seed: int, purpose: str, *indices: int) -> np.random.SeedSequence:
    if int(seed) < 0 or any(int(i) < 0 for i in indices):
        raise ValueError("seeds and indices must be non-negative")
    key = (purpose_code(purpose),) + tuple(int(i) for i in indices)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def substream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Generator for one ``(purpose, indices)`` cell of the master seed.

    Examples
    --------
    >>> a = substream(7, "noise", 3).standard_normal()
    >>> b = substream(7, "noise", 3).standard_normal()
    >>> a == b
    True
    """
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, purpose, *indices)))


def derived_int(seed: int, purpose: str, *indices: int) -> int:
    """A 32-bit integer seed for APIs that take plain integers."""
    return int(seed_sequence(seed, purpose, *indices).generate_state(1)[0])


__all__ = ["PURPOSES", "SCHEME", "derived_int", "purpose_code", "seed_sequence", "substream"]
