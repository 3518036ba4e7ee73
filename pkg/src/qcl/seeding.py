"""Counter-based deterministic randomness.

Every random quantity in the package is a pure function of a 64-bit key and
integer counters, built on the SplitMix64 finalizer. This gives O(1) access
to any element of any stream (needed for the invertible symbol shift), and
makes results independent of evaluation order and worker count.

Module-level keys are derived from the root seed by labeled hashing.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
# 2**-53, so (h >> 11) * _INV53 is uniform on [0, 1) with full double precision
_INV53 = 1.0 / (1 << 53)

_U64_ERRSTATE = {"over": "ignore"}


def mix64(z):
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(**_U64_ERRSTATE):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_key(root_seed: int, label: str) -> int:
    """Derive a 64-bit stream key from the root seed and a label."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _as_counter(i) -> np.ndarray:
    # signed indices map to uint64 by two's complement, preserving injectivity
    return np.asarray(i, dtype=np.int64).astype(np.uint64)


def hash_u64(key: int, *counters) -> np.ndarray:
    """Hash (key, counters...) to uint64, broadcasting over counter arrays."""
    h = mix64(np.uint64(key & 0xFFFFFFFFFFFFFFFF))
    for c in counters:
        with np.errstate(**_U64_ERRSTATE):
            h = mix64(h + _GAMMA * _as_counter(c))
    return h


def uniform(key: int, *counters) -> np.ndarray:
    """Deterministic uniforms on [0, 1), one per broadcasted counter tuple."""
    h = hash_u64(key, *counters)
    return (h >> np.uint64(11)).astype(np.float64) * _INV53
