"""Counter-based random streams addressed by (seed, path, step, channel).

Philox4x32-10, vectorised over numpy arrays. Every draw is a pure function
of its address, so any partition of the paths over workers reproduces the
same numbers bit for bit.
"""

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_LO32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# channel identifiers used by the samplers
GAUSS = 1
POISSON = 2
MARK = 3
TIMES = 4
BASE = 5


def philox4x32(counter, key):
    """Philox4x32-10 block function.

    ``counter`` is a 4-sequence of uint32 arrays (broadcastable), ``key`` a pair
    of uint32 scalars or arrays. Returns four uint32 arrays.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*[np.asarray(c, dtype=np.uint32) for c in counter])
    k0 = np.asarray(key[0], dtype=np.uint32)
    k1 = np.asarray(key[1], dtype=np.uint32)
    with np.errstate(over="ignore"):
        for r in range(10):
            if r:
                k0 = (k0 + _W0).astype(np.uint32)
                k1 = (k1 + _W1).astype(np.uint32)
            p0 = _M0 * c0.astype(np.uint64)
            p1 = _M1 * c2.astype(np.uint64)
            hi0 = (p0 >> _SHIFT32).astype(np.uint32)
            lo0 = (p0 & _LO32).astype(np.uint32)
            hi1 = (p1 >> _SHIFT32).astype(np.uint32)
            lo1 = (p1 & _LO32).astype(np.uint32)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def _seed_key(seed: int):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32)


def _to_unit(hi, lo):
    # 53-bit mantissa, open interval (0, 1)
    bits = (hi.astype(np.uint64) << np.uint64(21)) ^ (lo.astype(np.uint64) >> np.uint64(11))
    return (bits.astype(np.float64) + 0.5) * 2.0**-53


def uniforms(seed: int, paths, step: int, channel: int, sub: int = 0) -> np.ndarray:
    """Two independent U(0,1) draws per path, shape ``(len(paths), 2)``."""
    paths = np.asarray(paths, dtype=np.int64)
    if paths.size and (paths.min() < 0 or paths.max() >= 2**32):
        raise ValueError("path index must fit in 32 bits")
    key = _seed_key(seed)
    ctr = (paths.astype(np.uint32), np.uint32(step & 0xFFFFFFFF),
           np.uint32(channel), np.uint32(sub & 0xFFFFFFFF))
    r0, r1, r2, r3 = philox4x32(ctr, key)
    return np.stack([_to_unit(r0, r1), _to_unit(r2, r3)], axis=-1)


def uniform_block(seed: int, paths, step: int, channel: int, width: int) -> np.ndarray:
    """``width`` independent uniforms per path, shape ``(len(paths), width)``."""
    blocks = [uniforms(seed, paths, step, channel, sub) for sub in range((width + 1) // 2)]
    return np.concatenate(blocks, axis=-1)[:, :width]


def normals(seed: int, paths, step: int, channel: int, width: int) -> np.ndarray:
    """Standard normals by inverse CDF, shape ``(len(paths), width)``."""
    return ndtri(uniform_block(seed, paths, step, channel, width))
