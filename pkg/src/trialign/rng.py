"""Counter-based random streams keyed by (seed, stream id).

Every random draw in the package goes through :class:`Rng`, so a run is
fully determined by one top-level seed plus the names of the streams it
derives. Philox is counter based, which makes streams independent and
platform stable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str, *parts: int | str) -> int:
    """Hash a stream name and integer/str qualifiers into a 64-bit stream id."""
    h = hashlib.blake2b(digest_size=8)
    h.update(name.encode("utf-8"))
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass
class Rng:
    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream = int(self.stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def child(self, name: str, *parts: int | str) -> "Rng":
        """A new independent stream under the same seed."""
        return Rng(self.seed, stream_id(name, self.stream, *parts))

    @classmethod
    def named(cls, seed: int, name: str, *parts: int | str) -> "Rng":
        return cls(seed, stream_id(name, *parts))

    # thin conveniences used throughout
    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, lo, hi=None, size=None):
        return self._gen.integers(lo, hi, size)

    def permutation(self, n):
        return self._gen.permutation(n)
