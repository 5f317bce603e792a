"""Small deterministic numerics: matrices, softmax, masked argmax, random streams.

All randomness in the package flows through :class:`RandomStream`, a
counter-based generator. A value is a pure function of
``(seed, stream_id, counter)`` so workers and the coordinator can each own a
stream without sharing state, and any draw can be recomputed in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCandidateError, InvalidInputError

DTYPE = np.float32

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def as_matrix(data, rows: int | None = None, cols: int | None = None, dtype=DTYPE) -> np.ndarray:
    """Return ``data`` as a finite 2-D array, checking the shape if given."""
    m = np.array(data, dtype=dtype)
    if m.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise InvalidInputError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise InvalidInputError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    return m


def softmax(v) -> np.ndarray:
    """Softmax along the last axis, with max subtraction.

    Accepts a vector or a batch of row vectors. Output dtype follows the
    input for floating inputs.
    """
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("softmax input has non-finite entries")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_masked(v, mask=None):
    """Index of the largest entry among those where ``mask`` is true.

    Ties go to the lowest index. Works row-wise on 2-D input and then
    returns an integer array.
    """
    v = np.asarray(v)
    if mask is None:
        mask = np.ones(v.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    if not np.all(mask.any(axis=-1)):
        raise EmptyCandidateError("every candidate is masked out")
    masked = np.where(mask, v, -np.inf)
    # np.argmax returns the first occurrence, which is the tie-break we want.
    idx = np.argmax(masked, axis=-1)
    if v.ndim == 1:
        return int(idx)
    return idx


# --- counter-based random numbers -------------------------------------------

def _mix_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
        return z ^ (z >> np.uint64(31))


def _stream_key(seed: int, stream_id: int) -> int:
    return _mix_int(((seed & _MASK64) * _GOLDEN + _mix_int(stream_id + _GOLDEN)) & _MASK64)


def random_bits(seed: int, stream_id: int, counter: int) -> int:
    """The 64-bit word at position ``counter`` of stream ``(seed, stream_id)``."""
    key = _stream_key(int(seed), int(stream_id))
    return _mix_int(key + ((int(counter) + 1) * _GOLDEN & _MASK64))


def random_bits_at(seed: int, stream_id: int, counters: np.ndarray) -> np.ndarray:
    """Vectorised :func:`random_bits` over an array of counters."""
    key = np.uint64(_stream_key(int(seed), int(stream_id)))
    with np.errstate(over="ignore"):
        state = key + (counters.astype(np.uint64) + np.uint64(1)) * np.uint64(_GOLDEN)
    return _mix_array(state)


def random_bits_block(seed: int, stream_id: int, start: int, n: int) -> np.ndarray:
    """Words ``start .. start+n-1`` of a stream, as a uint64 array."""
    return random_bits_at(seed, stream_id, np.arange(start, start + n, dtype=np.uint64))


def _bits_to_unit(bits):
    # top 53 bits -> [0, 1)
    return (bits >> 11) * (1.0 / (1 << 53))


@dataclass
class RandomStream:
    """A cursor over one counter-based stream.

    ``uniform`` and the block draws advance ``counter``; copying a stream
    (``fork``) yields an independent cursor at the same position.
    """

    seed: int
    stream_id: int
    counter: int = field(default=0)

    def fork(self) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id, self.counter)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1); advances the counter by ``n``."""
        bits = random_bits_block(self.seed, self.stream_id, self.counter, n)
        self.counter += n
        return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normal draws (Box-Muller); consumes ``2 * ceil(n / 2)`` words."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2 * np.pi * u2)
        z[1::2] = r * np.sin(2 * np.pi * u2)
        return z[:n]


def uniform(rng: RandomStream) -> float:
    """One draw in [0, 1) from ``rng``; advances its counter by one."""
    value = _bits_to_unit(random_bits(rng.seed, rng.stream_id, rng.counter))
    rng.counter += 1
    return value
