"""Reproducible Gaussian increments from a counter-based generator.

Step ``j`` of the global time grid gets its own Philox stream keyed by
``(seed, j)``; path ``i`` reads position ``i`` of that stream.  The noise for a
given ``(seed, path, step)`` therefore never depends on how many steps were
simulated, on where the grid starts, or on scheduling, which is what common
random numbers across shifted or bumped paths require.
"""

from __future__ import annotations

import numpy as np

from .parallel import parallel_map

__all__ = ["derive_seed", "standard_normals", "brownian_increments"]

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 64-bit seed for a labelled sub-experiment."""
    entropy = [int(seed) & _MASK64] + [int(t) & _MASK64 for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def _step_normals(seed: int, step: int, rows: int, dim: int) -> np.ndarray:
    bitgen = np.random.Philox(key=np.array([int(seed) & _MASK64, int(step) & _MASK64], dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal((rows, dim))


def standard_normals(seed: int, n_paths: int, step_start: int, n_steps: int, dim: int, antithetic: bool = False) -> np.ndarray:
    """Array ``(n_paths, n_steps, dim)`` of N(0, 1) draws for global steps ``step_start...``.

    With ``antithetic`` the paths come in pairs ``(2m, 2m+1)`` with opposite noise.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if antithetic and n_paths % 2:
        raise ValueError("antithetic sampling needs an even number of paths")
    rows = n_paths // 2 if antithetic else n_paths
    blocks = parallel_map(lambda j: _step_normals(seed, step_start + j, rows, dim), range(n_steps))
    out = np.empty((n_steps, n_paths, dim))
    for j, z in enumerate(blocks):
        if antithetic:
            out[j, 0::2] = z
            out[j, 1::2] = -z
        else:
            out[j] = z
    return out.transpose(1, 0, 2)


def brownian_increments(seed: int, n_paths: int, step_start: int, n_steps: int, dim: int, dt: float, antithetic: bool = False) -> np.ndarray:
    return np.sqrt(dt) * standard_normals(seed, n_paths, step_start, n_steps, dim, antithetic)
