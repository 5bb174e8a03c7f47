"""Euler-Maruyama simulation of forward SDEs with path-dependent coefficients.

Starting from a history ``gamma_t``, the state follows

    X(s) = gamma(t) + int_t^s b(X_r) dr + int_t^s sigma(X_r) dW(r),   X = gamma on [0, t],

where ``X_r`` is the whole history up to ``r``.  Coefficients see that history
as a :class:`~pathfk.paths.PathBatch` view (``gamma`` spliced with the
simulated states so far), so nothing is copied inside the time loop.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .functionals import PathFunctional
from .paths import Path, PathBatch, SimulationGrid, TIME_TOL
from .rng import brownian_increments, derive_seed

__all__ = [
    "Driver",
    "PathEnsemble",
    "ProblemSpec",
    "concat_history",
    "lipschitz_probe",
    "simulate_ensemble",
    "simulate_from_increments",
    "strong_error",
]

# h(t, x, y, z) with x: (N, n), y: (N, m), z: (N, m, d) -> (N, m)
Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def zero_driver(t, x, y, z):
    return np.zeros_like(y)


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients ``(b, sigma, h, g)`` and horizon ``T`` of one forward-backward system.

    ``b`` has shape ``(n,)``, ``sigma`` ``(n, d)`` and ``g`` ``(m,)``.  The
    driver only sees the current time and state, ``h(gamma_t, y, z) =
    hbar(t, gamma(t), y, z)``.
    """

    b: PathFunctional
    sigma: PathFunctional
    g: PathFunctional
    T: float
    h: Driver = zero_driver
    name: str = "problem"

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        n = self.b.shape[0]
        if len(self.sigma.shape) != 2 or self.sigma.shape[0] != n:
            raise ValueError(f"sigma must have shape (n, d) with n={n}, got {self.sigma.shape}")

    @property
    def state_dim(self) -> int:
        return self.b.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.sigma.shape[1]

    @property
    def value_dim(self) -> int:
        return self.g.shape[0]

    def with_terminal(self, g: PathFunctional, h: Driver | None = None, name: str | None = None) -> ProblemSpec:
        return ProblemSpec(self.b, self.sigma, g, self.T, h if h is not None else self.h, name or self.name)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``N`` forward trajectories on ``grid`` conditioned on the history ``base``."""

    base: Path
    grid: SimulationGrid
    states: np.ndarray  # (N, steps + 1, n)
    dW: np.ndarray  # (N, steps, d)
    seed: int | None = None
    antithetic: bool = False
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "times", self.grid.times)
        self.states.setflags(write=False)
        self.dW.setflags(write=False)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.grid.steps

    def history(self, k: int) -> PathBatch:
        """All trajectories stopped at ``t_k`` (a view)."""
        return PathBatch(self.base, self.times[: k + 1], self.states[:, : k + 1, :])

    def full(self) -> PathBatch:
        return self.history(self.steps)

    def to_csv(self, target, include_increments: bool = False) -> None:
        """Rows ``path_id,step,time,state[,dW]``; vector states use ``state_1,...``."""
        n, d = self.states.shape[2], self.dW.shape[2]
        state_cols = ["state"] if n == 1 else [f"state_{i + 1}" for i in range(n)]
        dw_cols = (["dW"] if d == 1 else [f"dW_{i + 1}" for i in range(d)]) if include_increments else []
        own = not hasattr(target, "write")
        fh = open(target, "w", newline="") if own else target
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "step", "time"] + state_cols + dw_cols)
            for i in range(self.size):
                for k in range(self.steps + 1):
                    row = [i, k, repr(float(self.times[k]))] + [repr(float(x)) for x in self.states[i, k]]
                    if include_increments:
                        row += [repr(float(x)) for x in self.dW[i, k]] if k < self.steps else [""] * d
                    w.writerow(row)
        finally:
            if own:
                fh.close()


def _check_start(spec: ProblemSpec, gamma: Path, grid: SimulationGrid) -> None:
    if abs(gamma.time - grid.t_start) > TIME_TOL:
        raise ValueError(f"gamma stops at {gamma.time}, grid starts at {grid.t_start}")
    if abs(grid.t_end - spec.T) > TIME_TOL and grid.steps > 0:
        raise ValueError(f"grid ends at {grid.t_end}, horizon is {spec.T}")
    if gamma.dim != spec.state_dim:
        raise ValueError(f"gamma has dimension {gamma.dim}, problem has {spec.state_dim}")


def simulate_from_increments(spec: ProblemSpec, gamma: Path, grid: SimulationGrid, dW: np.ndarray, seed=None, antithetic=False) -> PathEnsemble:
    """Euler-Maruyama driven by the given increments ``dW`` of shape ``(N, steps, d)``."""
    _check_start(spec, gamma, grid)
    N = dW.shape[0]
    if dW.shape[1:] != (grid.steps, spec.noise_dim):
        raise ValueError(f"increments shape {dW.shape} does not fit {grid.steps} steps of {spec.noise_dim}-d noise")
    times = grid.times
    # time-major storage; coefficients and callers see (N, k + 1, n) views
    st = np.empty((grid.steps + 1, N, spec.state_dim))
    st[0] = gamma.last
    dw_t = dW.transpose(1, 0, 2)
    dts = np.diff(times)
    for k in range(grid.steps):
        hist = PathBatch(gamma, times[: k + 1], st[: k + 1].transpose(1, 0, 2))
        drift = spec.b.batch(hist)
        vol = spec.sigma.batch(hist)
        if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(vol))):
            raise FloatingPointError(f"non-finite coefficient at step {k} (t={times[k]:g})")
        if vol.shape[2] == 1:
            noise = vol[:, :, 0] * dw_t[k]
        else:
            noise = np.einsum("ijk,ik->ij", vol, dw_t[k])
        st[k + 1] = st[k] + drift * dts[k] + noise
    dW = np.array(dW, dtype=float, copy=True)
    return PathEnsemble(gamma, grid, st.transpose(1, 0, 2), dW, seed, antithetic)


def simulate_ensemble(spec: ProblemSpec, gamma: Path, grid: SimulationGrid, n_paths: int, seed: int, antithetic: bool = False) -> PathEnsemble:
    """Simulate ``n_paths`` trajectories; noise for path ``i`` at global step ``j`` depends on ``(seed, i, j)`` only."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    _check_start(spec, gamma, grid)
    dW = brownian_increments(seed, n_paths, grid.step_offset, grid.steps, spec.noise_dim, grid.dt, antithetic)
    return simulate_from_increments(spec, gamma, grid, dW, seed, antithetic)


def concat_history(gamma: Path, ensemble: PathEnsemble, path_index: int, step_index: int) -> Path:
    """History of trajectory ``path_index`` up to ``t_{step_index}`` as a standalone path."""
    if not 0 <= path_index < ensemble.size:
        raise IndexError(f"path_index {path_index} out of range [0, {ensemble.size})")
    if not 0 <= step_index <= ensemble.steps:
        raise IndexError(f"step_index {step_index} out of range [0, {ensemble.steps}]")
    if step_index == 0:
        return gamma
    return ensemble.history(step_index).path(path_index)


def strong_error(
    spec: ProblemSpec, gamma: Path, grid_coarse: SimulationGrid, levels: int, n_paths: int, seed: int, reference_extra: int = 4
) -> list[tuple[float, float]]:
    """RMS of ``|X_ref(T) - X_level(T)|`` for ``levels`` successive refinements.

    The reference grid is ``2**(levels - 1 + reference_extra)`` times finer than
    ``grid_coarse``; coarser increments are sums of the reference increments, so
    every level sees the same Brownian path.  With nested noise the squared
    error behaves like ``dt_level - dt_ref``, so a reference only one halving
    below the finest level would bias the fitted order upwards.
    """
    if levels < 1 or reference_extra < 1:
        raise ValueError("levels and reference_extra must be >= 1")
    depth = levels - 1 + reference_extra
    fine = SimulationGrid(grid_coarse.t_start, grid_coarse.t_end, grid_coarse.steps * 2**depth)
    dW_fine = brownian_increments(seed, n_paths, 0, fine.steps, spec.noise_dim, fine.dt)
    ref = simulate_from_increments(spec, gamma, fine, dW_fine).states[:, -1, :]
    out = []
    for level in range(levels):
        factor = 2 ** (depth - level)
        grid = SimulationGrid(grid_coarse.t_start, grid_coarse.t_end, grid_coarse.steps * 2**level)
        dW = dW_fine.reshape(n_paths, grid.steps, factor, spec.noise_dim).sum(axis=2)
        x_T = simulate_from_increments(spec, gamma, grid, dW).states[:, -1, :]
        rms = float(np.sqrt(np.mean(np.sum((x_T - ref) ** 2, axis=1))))
        out.append((grid.dt, rms))
    return out


def lipschitz_probe(F: PathFunctional, paths: list[Path], bump_scale: float = 0.1, seed: int = 0, bound: float | None = None) -> float:
    """Largest observed ``|F(p) - F(q)| / ||p - q||`` over random sup-norm perturbations.

    This cannot certify a Lipschitz constant; it warns when the ratio exceeds
    ``bound``.
    """
    rng = np.random.default_rng(derive_seed(seed, 0x11))
    worst = 0.0
    for p in paths:
        noise = rng.uniform(-bump_scale, bump_scale, size=p.values.shape)
        q = Path(p.grid, p.values + noise)
        gap = float(np.max(np.linalg.norm(noise, axis=1)))
        diff = float(np.linalg.norm(np.ravel(F(p) - F(q))))
        if gap > 0:
            worst = max(worst, diff / gap)
    if bound is not None and worst > bound:
        warnings.warn(f"{F.name}: observed difference ratio {worst:.3g} exceeds {bound:.3g}", stacklevel=2)
    return worst
