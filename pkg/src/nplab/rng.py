"""Counter-based random streams for schedule-independent reproducibility.

Every random draw in the library comes from a stream keyed by the tuple
``(experiment_seed, purpose, epoch, iteration, task_index)``. The key is
hashed with SHA-256 into a Philox counter key, so distinct tuples give
statistically independent streams and the same tuple always replays the
same draws, no matter in which order (or on how many workers) the streams
are consumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

__all__ = ["RngStream"]


@dataclass(frozen=True)
class RngStream:
    """Immutable key of one random stream; ``generator()`` opens it."""

    seed: int
    purpose: str
    epoch: int = 0
    iteration: int = 0
    task_index: int = 0

    def key_bytes(self) -> bytes:
        tag = f"{self.seed}|{self.purpose}|{self.epoch}|{self.iteration}|{self.task_index}"
        return hashlib.sha256(tag.encode("utf-8")).digest()

    def generator(self) -> np.random.Generator:
        key = int.from_bytes(self.key_bytes()[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, **overrides) -> "RngStream":
        return replace(self, **overrides)
