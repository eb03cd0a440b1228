"""Deterministic random streams and counter-based uniform hashing.

One 64-bit master seed drives everything.  Each logical consumer derives an
independent stream from (master seed, purpose tag, indices) through a fixed
splitmix-style mixing chain, so results are bit-identical across platforms
and independent of scheduling.  Per-coordinate uniforms for percolation
realizations come from the same chain evaluated as a pure function of the
coordinates, which makes a realization answer queries consistently no matter
in which order they arrive.
"""
from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GAMMA = np.uint64(_GAMMA)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)
_INV53 = 1.0 / float(1 << 53)


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int, exact 64-bit semantics."""
    z = (z + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_key(master_seed: int, tag: str, *indices: int) -> int:
    """64-bit key for (seed, tag, indices); the only stream-naming scheme."""
    h = mix64(master_seed & _MASK)
    for byte in tag.encode("utf-8"):
        h = mix64(h ^ byte)
    for ix in indices:
        h = mix64(h ^ (int(ix) & _MASK))
    return h


def stream(master_seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Independent Philox generator for one logical consumer."""
    k1 = derive_key(master_seed, tag, *indices)
    k2 = mix64(k1)
    key = np.array([k1, k2], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _mix_u64(z: np.ndarray) -> np.ndarray:
    z = z + _U_GAMMA
    z = (z ^ (z >> _U30)) * _U_MIX1
    z = (z ^ (z >> _U27)) * _U_MIX2
    return z ^ (z >> _U31)


def hash_u01(base: int, *coords) -> np.ndarray | float:
    """Uniform(0,1) as a pure function of (base key, integer coordinates).

    Coordinates may be ints or broadcastable integer arrays; negative values
    hash via their two's-complement image.  Scalar inputs return a float.
    """
    arrays = [np.asarray(c, dtype=np.int64) for c in coords]
    shape = np.broadcast_shapes(*(a.shape for a in arrays)) if arrays else ()
    h = np.full(shape, np.uint64(base & _MASK), dtype=np.uint64)
    for a in arrays:
        h = _mix_u64(h ^ a.astype(np.uint64))
    u = (h >> _U11).astype(np.float64) * _INV53
    if shape == ():
        return float(u)
    return u
