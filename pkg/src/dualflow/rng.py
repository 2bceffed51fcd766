"""Counter-based random streams.

Paths are generated in fixed-size blocks; block ``b`` of a run seeded with
``seed`` always draws from ``Philox(key=(seed, b))``.  The normals a path
receives therefore depend only on ``(seed, path index, n_steps)`` and never
on how blocks are scheduled across threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

BLOCK_SIZE = 1024
_MASK64 = (1 << 64) - 1


def block_generator(seed: int, block: int) -> np.random.Generator:
    key = np.array([int(seed) & _MASK64, int(block) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def block_normals(seed: int, block: int, n_streams: int, n_steps: int,
                  block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Standard normals of shape ``(n_streams, block_size, n_steps)`` for one block."""
    return block_generator(seed, block).standard_normal((n_streams, block_size, n_steps))


def map_blocks(fn: Callable[[int], np.ndarray], n_blocks: int, threads: int = 1) -> list:
    """Evaluate ``fn`` on every block index, in order, with up to ``threads`` workers."""
    if threads <= 1 or n_blocks <= 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_blocks)))


def gaussian_increments(seed: int, n_paths: int, n_steps: int, dt: float, n_streams: int = 1,
                        threads: int = 1, block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Brownian increments of shape ``(n_streams, n_paths, n_steps)``."""
    n_blocks = -(-n_paths // block_size)

    def one(b):
        return block_normals(seed, b, n_streams, n_steps, block_size)

    blocks = map_blocks(one, n_blocks, threads)
    out = np.concatenate(blocks, axis=1)[:, :n_paths, :]
    return out * np.sqrt(dt)
