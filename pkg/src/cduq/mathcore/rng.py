"""Deterministic counter-based random streams.

A stream is a ``(seed, counter)`` pair; draw ``i`` is the SplitMix64
finalizer applied to ``seed + (counter + i + 1) * GOLDEN`` (see the kernel
modules), so a stream is a pure function of its seed and every draw is
addressable. Equal seeds give equal sequences on every platform and
backend; restoring a stream is just restoring two integers.

``derive`` builds statistically independent child streams by hashing tags
into a fresh seed, in a seed-space disjoint from draw positions (an XOR
salt separates the two uses). Tags may be ints or strings; strings are
FNV-1a hashed. The scheme is stable: it is part of the on-disk
reproducibility contract, not an implementation detail.
"""

from array import array

from .. import kernels

_M64 = 0xFFFFFFFFFFFFFFFF
_DERIVE_SALT = 0xD1B54A32D192ED03
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _tag_to_u64(tag):
    if isinstance(tag, str):
        h = _FNV_OFFSET
        for byte in tag.encode("utf-8"):
            h = ((h ^ byte) * _FNV_PRIME) & _M64
        return h
    if isinstance(tag, int):
        return tag & _M64
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


class RngStream:
    """Counter-based RNG stream over 64-bit SplitMix draws."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed, counter=0):
        self.seed = seed & _M64
        self.counter = counter & _M64

    def __repr__(self):
        return f"RngStream(seed={self.seed:#x}, counter={self.counter})"

    def derive(self, *tags):
        """Return an independent child stream named by ``tags``."""
        if not tags:
            raise ValueError("derive requires at least one tag")
        seed = self.seed
        for tag in tags:
            seed = kernels.u64_at(seed ^ _DERIVE_SALT, _tag_to_u64(tag))
        return RngStream(seed)

    def _take(self, n):
        start = self.counter
        self.counter = (self.counter + n) & _M64
        return start

    def uniforms(self, n):
        """Array of n uniforms in [0, 1)."""
        out = array("d", bytes(8 * n))
        kernels.fill_uniform(out, self.seed, self._take(n))
        return out

    def gaussians(self, n):
        """Array of n standard normals (consumes 2 * ceil(n / 2) draws)."""
        out = array("d", bytes(8 * n))
        kernels.fill_gaussian(out, self.seed, self._take(2 * ((n + 1) // 2)))
        return out

    def uniform(self):
        return kernels.unit_at(self.seed, self._take(1))

    def randint(self, n):
        """Integer in [0, n) by multiply-shift reduction of one draw."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return (kernels.u64_at(self.seed, self._take(1)) * n) >> 64

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, n, count):
        """Sorted sample of ``count`` distinct indices from range(n)."""
        if not 0 <= count <= n:
            raise ValueError(f"cannot sample {count} of {n} indices")
        pool = list(range(n))
        for i in range(count):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return sorted(pool[:count])
