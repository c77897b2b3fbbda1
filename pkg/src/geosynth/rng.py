"""Deterministic random streams.

Every random draw in the package goes through :class:`Rng`, a ``(seed, stream)``
pair that keys numpy's counter-based Philox bit generator. Philox output depends
only on its 128-bit key and counter, so equal pairs reproduce the same sequence
on any platform, and distinct keys give independent streams.

Child streams are derived by hashing the parent stream id together with a label
(blake2b, 8-byte digest). Replicates, strata, clusters and trees each get their
own child so work can be reordered or parallelised without changing results.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(stream: int, label: str) -> int:
    digest = hashlib.blake2b(f"{stream}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Rng:
    seed: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)

    def child(self, *labels) -> "Rng":
        stream = self.stream
        for label in labels:
            stream = _mix(stream, str(label))
        return Rng(self.seed, stream)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child_seed(self, *labels) -> int:
        """A 64-bit integer seed for a child stream (for manifests)."""
        return self.child(*labels).stream
