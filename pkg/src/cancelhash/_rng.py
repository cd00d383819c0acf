"""SplitMix64 streams and keyed derivation of integers and permutations.

Every keyed decision in the hashing stage goes through this module so that
two independent implementations following the same recipe emit identical
hash codes:

* ``mix(seed, *parts)`` folds integers and ASCII tags into one 64-bit word:
  ``h = fmix(seed)``, then ``h = fmix(h ^ word)`` for each part, where ``fmix``
  is the SplitMix64 output function applied to ``x + 0x9E3779B97F4A7C15``.
  A string tag (at most 8 UTF-8 bytes) becomes the little-endian integer of
  its bytes, zero padded.
* uniform integers in ``[0, n)`` use rejection sampling on 64-bit outputs,
  rejecting values at or above ``2**64 - (2**64 % n)``.
* permutations are Fisher-Yates shuffles of ``1..l``, swapping position
  ``i`` (from ``l-1`` down to ``1``, zero based) with ``uniform(i + 1)``.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _fmix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def _word(part) -> int:
    if isinstance(part, str):
        raw = part.encode("utf-8")
        if len(raw) > 8:
            # longer tags would silently collide on their first eight bytes
            raise ValueError(f"mix tag {part!r} is longer than 8 bytes")
        return int.from_bytes(raw.ljust(8, b"\0"), "little")
    if isinstance(part, bool) or not isinstance(part, int):
        raise TypeError(f"cannot mix {type(part).__name__}")
    return part & MASK64


def mix(seed: int, *parts) -> int:
    h = _fmix((_word(seed) + GOLDEN_GAMMA) & MASK64)
    for part in parts:
        h = _fmix(((h ^ _word(part)) + GOLDEN_GAMMA) & MASK64)
    return h


class SplitMix64:
    """Vigna's SplitMix64 generator."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _fmix(self.state)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` without modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n

    def between(self, low: int, high: int) -> int:
        """Uniform integer in the closed range ``[low, high]``."""
        return low + self.below(high - low + 1)


def fisher_yates(length: int, stream: SplitMix64) -> list[int]:
    """A uniformly random permutation of ``1..length`` (one based)."""
    perm = list(range(1, length + 1))
    for i in range(length - 1, 0, -1):
        j = stream.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
