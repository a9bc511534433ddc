"""Counter-based pseudo-random generator.

The generator is SplitMix64 read as a counter-based function: the n-th 64-bit output
of stream ``key`` is ``mix64(key + (n + 1) * GOLDEN)`` with all arithmetic modulo
2**64, where::

    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

Uniform doubles in [0, 1) take the top 53 bits, ``(x >> 11) * 2**-53``; the open
variant in (0, 1) adds half a step, ``((x >> 11) + 0.5) * 2**-53``. The scalar code
(Python integers) and the vectorised code (NumPy ``uint64``) produce the same bits,
so any output can be regenerated from ``(key, counter)`` alone on any platform.
"""

import hashlib
import math

import numpy as np

__all__ = [
    "CounterStream",
    "mix64",
    "mix64_array",
    "mix_seed",
    "name_seed",
    "uniform_array",
]

MASK64 = 0xFFFF_FFFF_FFFF_FFFF
GOLDEN = 0x9E37_79B9_7F4A_7C15
_M1 = 0xBF58_476D_1CE4_E5B9
_M2 = 0x94D0_49BB_1331_11EB
_TWO_M53 = 2.0**-53


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    """Vectorised :func:`mix64` over a ``uint64`` array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def mix_seed(seed: int, stream: int) -> int:
    """Derive an independent substream key from ``seed`` and a stream index."""
    return mix64(seed ^ mix64((stream + 1) * GOLDEN))


def name_seed(seed: int, name: str) -> int:
    """Derive a substream key from ``seed`` and a string, e.g. a tensor name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return mix64(seed ^ int.from_bytes(digest[:8], "little"))


def uniform_array(key: int, n: int, start: int = 0) -> np.ndarray:
    """Uniform doubles in [0, 1) for counters ``start .. start + n - 1`` of ``key``."""
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    state = np.uint64(key & MASK64) + counters * np.uint64(GOLDEN)
    bits = mix64_array(state)
    return (bits >> np.uint64(11)).astype(np.float64) * _TWO_M53


class CounterStream:
    """Sequential reader over one key of the counter-based generator."""

    def __init__(self, key: int, counter: int = 0):
        if not 0 <= key <= MASK64:
            raise ValueError(f"Key must be a 64-bit unsigned integer, got {key}")
        self.key = key
        self.counter = counter

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.key + self.counter * GOLDEN)

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _TWO_M53

    def open_uniform(self) -> float:
        """Uniform double in the open interval (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) * _TWO_M53

    def normal(self) -> float:
        """Standard normal variate (Box-Muller, cosine branch)."""
        u1 = self.open_uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
