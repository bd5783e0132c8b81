"""Seeded, portable random number generation.

The random frequency vectors that define the encoder must be reproducible
bit-for-bit across runs and across implementations in other languages, so
the generator is pinned to an exact algorithm (SplitMix64 feeding
Box-Muller) instead of delegating to ``numpy.random``, whose streams are
free to change between versions. Checkpoints additionally embed their
frequency vectors verbatim, so this pinning matters mainly for fresh
encoder construction.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(seed: int, n: int) -> np.ndarray:
    """Return the first ``n`` outputs of a SplitMix64 stream as uint64.

    The k-th output (k >= 0) is ``mix(seed + (k + 1) * 0x9E3779B97F4A7C15)``
    with all arithmetic modulo 2**64, where ``mix`` is the standard
    SplitMix64 finalizer:

        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
        z ^= z >> 27;  z *= 0x94D049BB133111EB
        z ^= z >> 31

    Because the state advances by a fixed increment, the whole stream is
    computed vectorized without carrying state.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + k * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def standard_normals(seed: int, n: int) -> np.ndarray:
    """Return ``n`` i.i.d. N(0, 1) draws from a pinned SplitMix64 stream.

    Each pair of normals consumes exactly two 64-bit outputs ``(a, b)``:

        u1 = ((a >> 11) + 1) * 2**-53     in (0, 1], safe for log
        u2 = (b >> 11) * 2**-53           in [0, 1)
        r  = sqrt(-2 ln u1)
        z0, z1 = r cos(2 pi u2), r sin(2 pi u2)

    For odd ``n`` the second draw of the final pair is discarded. This
    recipe is part of the cross-implementation contract: any port that
    follows it reproduces identical frequency vectors bit-for-bit.
    """
    pairs = (n + 1) // 2
    raw = splitmix64(seed, 2 * pairs)
    a = raw[0::2]
    b = raw[1::2]
    u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (b >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]
