"""Counter-based random streams.

Every random walk owns a 64-bit stream key derived from (seed, tags...). Draws
are a splitmix64 sequence on that key, so a walk's randomness depends only on
its key and never on scheduling, batching or thread count.
"""
import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def stream_key(seed, a, b, c):
    k = mix64(np.uint64(seed) + GOLDEN)
    k = mix64(k ^ (np.uint64(a) + GOLDEN))
    k = mix64(k ^ (np.uint64(b) + GOLDEN))
    return mix64(k ^ (np.uint64(c) + GOLDEN))


@njit(cache=True, inline="always")
def next_uniform(state):
    """Advance ``state``; return (new_state, u) with u uniform in [0, 1)."""
    state = state + GOLDEN
    return state, np.float64(mix64(state) >> _S11) * _INV53


def seed_sequence(seed, *tags):
    """numpy Generator for vectorized, non-walk sampling (cache point placement)."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    words += [int(t) & 0xFFFFFFFF for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
