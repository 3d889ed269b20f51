"""Counter-based seed derivation for reproducible parallel Monte Carlo.

Every path draws its noise from a generator keyed by (master seed, path
index, stream tag), so batches split across any number of workers produce
identical results, and auxiliary randomness (bootstraps, probe clouds) lives
on streams that never collide with path noise.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

__all__ = ["derive_seed", "rng_for", "path_noise"]

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, path_index: int, stream_tag: str = "path") -> int:
    """Mix (master, path_index, stream_tag) into a 64-bit stream seed.

    Pure function of its inputs on every platform; distinct inputs give
    distinct outputs up to the collision resistance of blake2b.
    """
    if path_index < 0:
        raise ValueError(f"path_index must be non-negative, got {path_index}")
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<QQ", master & _MASK64, path_index & _MASK64))
    h.update(stream_tag.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng_for(master: int, path_index: int, stream_tag: str = "path") -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, path_index, stream_tag))


def path_noise(master: int, path_indices, steps: int, dim_noise: int, dt: float, stream_tag: str = "path"):
    """Stack per-path N(0, dt*I) increments: shape (len(indices), steps, m).

    Each path's block depends only on its own index, never on the batch
    layout, so results are worker-count independent.
    """
    idx = list(path_indices)
    out = np.empty((len(idx), steps, dim_noise))
    scale = np.sqrt(dt)
    for j, i in enumerate(idx):
        out[j] = rng_for(master, i, stream_tag).normal(0.0, scale, size=(steps, dim_noise))
    return out
