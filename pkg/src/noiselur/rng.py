"""Deterministic random streams.

Two layers of randomness, both derived from a single master seed:

* Orchestration (fold plans, synthetic data, permutation tests) uses NumPy
  ``Generator`` objects backed by Philox, keyed by a path of integers so
  that every consumer owns an independent substream.  Parallel execution
  order therefore cannot change any result.
* Model kernels (bootstrap draws, feature subsampling) use a splitmix64
  chain implemented with identical integer arithmetic in the compiled
  extension and the pure-Python fallback, so both produce bit-identical
  fits.
"""
from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIXMUL = 0xD1342543DE82EF95


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning ``(new_state, output)``."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, (z ^ (z >> 31)) & MASK64


def mix(a: int, b: int) -> int:
    """Collapse two 64-bit integers into one well-mixed 64-bit value."""
    state = (a ^ ((b & MASK64) * _MIXMUL & MASK64)) & MASK64
    _, z = splitmix64(state)
    return z


def derive_seed(master: int, *path: int) -> int:
    """Fold a path of integers into a 64-bit seed.

    ``derive_seed(s)`` returns ``s & MASK64`` unchanged; each extra path
    element applies one mixing round, so distinct paths give independent
    seeds.
    """
    state = master & MASK64
    for p in path:
        state = mix(state, p)
    return state


def substream(master: int, *path: int) -> np.random.Generator:
    """A NumPy generator owned by ``(master, *path)``.

    The same arguments always give a generator in the same state,
    independent of any other substream drawn elsewhere.
    """
    key = np.array([derive_seed(master, *path), master & MASK64],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
