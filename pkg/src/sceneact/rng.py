"""Counter-based splittable random streams.

Every source of randomness in the package flows through an RngStream, a
value type identified by (seed, stream). Child streams are derived by
mixing indices or names into the stream id, so independent consumers
(clips, layers, epochs) can draw in any order without affecting each
other. Identical (seed, stream) pairs always reproduce identical draws.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Finalizer from the splitmix64 generator; good 64-bit avalanche.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix(stream: int, index: int) -> int:
    return _splitmix64((stream ^ _splitmix64(index & _MASK64)) & _MASK64)


@dataclass(frozen=True)
class RngStream:
    """Immutable handle on a deterministic random sequence."""

    seed: int
    stream: int = 0

    def child(self, *indices: int) -> "RngStream":
        """Derive an independent sub-stream from integer indices."""
        s = self.stream
        for ix in indices:
            s = _mix(s, int(ix))
        return RngStream(self.seed, s)

    def child_named(self, name: str) -> "RngStream":
        """Derive an independent sub-stream from a string label."""
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        return self.child(int.from_bytes(digest[:8], "little"))

    def generator(self) -> np.random.Generator:
        """Fresh Philox generator keyed by (seed, stream).

        Philox is counter-based, so the returned generator depends only on
        the key; repeated calls restart the same sequence.
        """
        key = (self.seed & _MASK64) | ((self.stream & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))
