"""Counter-based random numbers keyed on integer tuples.

Every draw is a pure function of ``(key..., index)``, so results do not depend
on iteration order, batch composition or worker count.
"""
from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def _absorb(state: np.ndarray, value) -> np.ndarray:
    v = np.asarray(value, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        return _mix(state + _GOLDEN + _mix(v + _GOLDEN))


def keyed_bits(key: tuple[int, ...], index: np.ndarray, stream: int = 0) -> np.ndarray:
    """64-bit hashes of ``(key, stream, index)`` for each entry of ``index``."""
    state = np.zeros(np.shape(index), dtype=np.uint64)
    for k in key:
        state = _absorb(state, int(k))
    state = _absorb(state, int(stream))
    return _absorb(state, index)


def keyed_uniform(key: tuple[int, ...], index, stream: int = 0) -> np.ndarray:
    """Uniform floats in [0, 1) with 53 bits of precision."""
    bits = keyed_bits(key, np.asarray(index), stream)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def keyed_uniform_matrix(key: tuple[int, ...], index, width: int) -> np.ndarray:
    """``len(index) x width`` uniforms; column ``j`` uses stream ``j``."""
    index = np.asarray(index)
    return np.stack([keyed_uniform(key, index, stream=j) for j in range(width)], axis=-1)


def derive_seed(*key: int) -> int:
    """Collapse a key tuple into a non-negative 63-bit seed."""
    return int(keyed_bits(tuple(key[:-1]), np.asarray(key[-1]))) & 0x7FFFFFFFFFFFFFFF if key else 0
