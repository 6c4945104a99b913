"""Counter-based random streams.

Every random number is a pure function of a 128-bit key and a 256-bit
counter (Philox4x64-10, bit-compatible with :class:`numpy.random.Philox`).
Keys identify streams, counters identify positions inside a stream, so a
whole ensemble of replica streams can be evaluated in one vectorized call and
replica ``r`` produces the same numbers whether it is simulated alone or as
part of a batch of any size.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RngStream", "philox4x64", "to_unit_open", "block_uniforms"]

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S12 = np.uint64(12)
_MASK64 = (1 << 64) - 1

# counter word 3 tags; data blocks always use tag 0
_SPLIT_TAG = 0x5B117
_AUX_TAG = 1

ROUNDS = 10


def _mulhilo(a, b):
    a0 = a & _LO32
    a1 = a >> _S32
    b0 = b & _LO32
    b1 = b >> _S32
    p00 = a0 * b0
    p01 = a0 * b1
    p10 = a1 * b0
    p11 = a1 * b1
    mid = (p00 >> _S32) + (p01 & _LO32) + (p10 & _LO32)
    hi = p11 + (p01 >> _S32) + (p10 >> _S32) + (mid >> _S32)
    return hi, a * b


def philox4x64(ctr, key):
    """Philox4x64-10 bijection, broadcast over array-valued words.

    ``ctr`` is a 4-sequence and ``key`` a 2-sequence of uint64 scalars or
    arrays (all broadcastable). Returns the four output words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in ctr)
    k0, k1 = (np.asarray(k, dtype=np.uint64) for k in key)
    with np.errstate(over="ignore"):
        for r in range(ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def to_unit_open(words):
    """Map uint64 words to doubles in the open interval (0, 1).

    52 bits are kept so that the largest value, 1 - 2^-53, is exactly
    representable (a 53-bit midpoint grid would round up to 1.0).
    """
    return ((np.asarray(words, dtype=np.uint64) >> _S12).astype(np.float64) + 0.5) * 2.0**-52


def block_uniforms(keys, position, n_words: int) -> np.ndarray:
    """Uniforms for one simulation step of many streams.

    ``keys`` has shape (N, 2); ``position`` is a scalar or (N,) array of
    step counters. Returns an (N, n_words) array. Words come from blocks
    ``(position, j, 0, 0)`` for ``j = 0, 1, ...`` taken four at a time.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 2)
    pos = np.broadcast_to(np.asarray(position, dtype=np.uint64), (keys.shape[0],))
    zero = np.zeros(keys.shape[0], dtype=np.uint64)
    n_blocks = max(1, -(-n_words // 4))
    out = []
    for j in range(n_blocks):
        words = philox4x64((pos, zero + np.uint64(j), zero, zero), (keys[:, 0], keys[:, 1]))
        out.extend(words)
    return to_unit_open(np.stack(out[:n_words], axis=1))


def derive_keys(keys, children) -> np.ndarray:
    """Child keys for each (parent key, child id) pair, broadcast."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 2)
    children = np.asarray(children, dtype=np.uint64)
    tag = np.uint64(_SPLIT_TAG)
    w0, w1, _, _ = philox4x64(
        (children, np.uint64(0), np.uint64(0), tag), (keys[:, 0], keys[:, 1])
    )
    w0, w1 = np.broadcast_arrays(w0, w1)
    return np.stack([w0.ravel(), w1.ravel()], axis=1)


class RngStream:
    """A reproducible random stream.

    ``RngStream(seed)`` is a root stream; :meth:`split` derives independent
    children, :meth:`spawn_keys` derives many children at once (used for
    replica ensembles). ``position`` counts consumed step blocks.
    """

    def __init__(self, seed: int = 0, *, key=None, position: int = 0):
        if key is None:
            key = (int(seed) & _MASK64, 0)
        self.key = np.asarray(key, dtype=np.uint64).reshape(2)
        self.position = int(position)

    def __repr__(self) -> str:
        return f"RngStream(key=({int(self.key[0]):#x}, {int(self.key[1]):#x}), position={self.position})"

    @property
    def token(self) -> str:
        """Hex token identifying the stream (used in manifests/exports)."""
        return f"{int(self.key[0]):016x}{int(self.key[1]):016x}"

    def split(self, child: int) -> RngStream:
        return RngStream(key=derive_keys(self.key, int(child))[0])

    def spawn_keys(self, n: int, offset: int = 0) -> np.ndarray:
        """Keys of children ``offset .. offset + n - 1`` as an (n, 2) array."""
        return derive_keys(self.key, np.arange(offset, offset + n, dtype=np.uint64))

    def next_block(self, n_words: int) -> np.ndarray:
        """Uniforms for the next step; advances ``position`` by one."""
        u = block_uniforms(self.key[None, :], self.position, n_words)[0]
        self.position += 1
        return u

    def generator(self) -> np.random.Generator:
        """numpy Generator on this key, disjoint from the step blocks."""
        bitgen = np.random.Philox(key=self.key.copy(), counter=[0, 0, _AUX_TAG, 0])
        return np.random.Generator(bitgen)
