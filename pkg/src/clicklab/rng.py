"""Counter-based random streams.

Every uniform variate is a pure function of (master seed, query, impression
index, slot), so a log can be generated in any order, in chunks, or by any
number of workers and still come out identical.
"""
from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SLOT_MUL = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 2.0 ** -53

POLICY_SLOT = 0
CLICK_SLOT0 = 1


def _mix(z):
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2**64
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _digest64(*parts) -> int:
    text = "|".join(f"{type(p).__name__}:{p}" for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def derive_seed(master, *labels) -> int:
    """Deterministic child seed for (master, labels...), e.g. a replication index."""
    return _digest64(int(master), *labels)


def stream_key(seed, query) -> int:
    return _digest64(int(seed), query)


def counter_uniforms(key: int, indices, slots) -> np.ndarray:
    """Uniforms in [0, 1) for the broadcast grid of impression indices x slots."""
    idx = np.asarray(indices, dtype=np.uint64)
    slot = np.asarray(slots, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(key) + (idx + np.uint64(1)) * _GOLDEN)
        h = _mix(h ^ ((slot + np.uint64(1)) * _SLOT_MUL))
    return (h >> np.uint64(11)).astype(np.float64) * _TO_UNIT


class ImpressionStream:
    """The random stream owned by one impression."""

    def __init__(self, seed, query, index: int):
        self.key = stream_key(seed, query)
        self.index = int(index)

    def uniform(self, slot: int) -> float:
        return float(counter_uniforms(self.key, self.index, slot))

    def uniforms(self, start: int, count: int) -> np.ndarray:
        return counter_uniforms(self.key, self.index, np.arange(start, start + count))
