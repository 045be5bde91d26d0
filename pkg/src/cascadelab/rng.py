"""Deterministic named randomness substreams.

All randomness in the package flows from one root seed through named
substreams, e.g. ``substream(seed, "trial", 17)`` or
``substream(seed, "shuffle", epoch)``. Streams are derived by hashing the
(seed, *path) tuple with SHA-256, so results are identical across runs,
platforms, and any parallel execution order.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

PathPart = int | str


def _entropy(seed: int, path: tuple[PathPart, ...]) -> list[int]:
    canonical = json.dumps([int(seed), *path], separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def substream(seed: int, *path: PathPart) -> np.random.Generator:
    """Generator for the substream named by ``path`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(seed, path))))


def derive_seed(seed: int, *path: PathPart) -> int:
    """A 63-bit child seed for a nested component with its own substreams."""
    low = _entropy(seed, path)
    return (low[0] | (low[1] << 32)) & 0x7FFF_FFFF_FFFF_FFFF
