"""Counter-derived random streams usable inside numba kernels.

Every photon packet owns a xoroshiro128+ state seeded from ``(seed, index)``
through splitmix64, so a packet draws the same numbers no matter which worker
traces it or in which order packets are scheduled.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def splitmix64(x):
    z = np.uint64(x) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def seed_stream(state, seed, index):
    """Fill ``state`` (uint64[2]) for packet ``index`` of run ``seed``."""
    a = splitmix64(np.uint64(seed))
    b = splitmix64(a ^ (np.uint64(index) * _GOLDEN))
    s0 = splitmix64(b)
    s1 = splitmix64(s0)
    if s0 == np.uint64(0) and s1 == np.uint64(0):
        s1 = np.uint64(1)
    state[0] = s0
    state[1] = s1


@njit(cache=True)
def next_uniform(state):
    """Uniform double in [0, 1) with 53 random bits."""
    s0 = state[0]
    s1 = state[1]
    result = s0 + s1
    s1 ^= s0
    state[0] = _rotl(s0, 24) ^ s1 ^ (s1 << np.uint64(16))
    state[1] = _rotl(s1, 37)
    return float(result >> np.uint64(11)) * _INV53


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for a (seed, key, ...) tuple."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@njit(cache=True)
def uniforms(seed, index, n):
    """First ``n`` draws of packet stream ``(seed, index)``; used by tests."""
    state = np.empty(2, dtype=np.uint64)
    seed_stream(state, seed, index)
    out = np.empty(n)
    for i in range(n):
        out[i] = next_uniform(state)
    return out
