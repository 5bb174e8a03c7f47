"""Right-continuous step paths on finite grids.

A :class:`Path` is a stopped path ``gamma_t``: the value on ``[grid[k], grid[k+1])``
is ``values[k]`` and the value at the current time ``t = grid[-1]`` is
``values[-1]``.  A :class:`PathBatch` is many paths sharing a common history
prefix, which is what the solvers hand to coefficient functionals.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np

__all__ = [
    "Path",
    "PathBatch",
    "SimulationGrid",
    "d_infinity",
    "discretize_n",
    "eval_path",
    "flat_extension",
    "read_path_csv",
    "sup_norm",
    "vertical_bump",
    "write_path_csv",
]

# Tolerance used when comparing times that were produced by arithmetic.
TIME_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


class Path:
    """A cadlag path on ``[0, t]`` sampled on a strictly increasing grid.

    ``values`` may be given as a 1-d sequence for scalar paths; internally it
    is always stored with shape ``(len(grid), dim)``.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: Sequence[float], values: Sequence) -> None:
        grid_arr = np.asarray(grid, dtype=float)
        vals = np.asarray(values, dtype=float)
        if grid_arr.ndim != 1 or grid_arr.size == 0:
            raise ValueError("grid must be a non-empty 1-d sequence")
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != grid_arr.size:
            raise ValueError(
                f"values must have one row per grid node, got {vals.shape} for {grid_arr.size} nodes"
            )
        if vals.shape[1] < 1:
            raise ValueError("state dimension must be >= 1")
        if grid_arr[0] != 0.0:
            raise ValueError(f"paths start at time 0, got grid[0]={grid_arr[0]}")
        if np.any(np.diff(grid_arr) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not (np.all(np.isfinite(grid_arr)) and np.all(np.isfinite(vals))):
            raise ValueError("path contains non-finite entries")
        object.__setattr__(self, "grid", _frozen(grid_arr))
        object.__setattr__(self, "values", _frozen(vals))

    def __setattr__(self, name, value):
        raise AttributeError("Path is immutable")

    @classmethod
    def constant(cls, value, t: float = 0.0) -> Path:
        """Constant path on ``[0, t]`` (a single node when ``t == 0``)."""
        v = np.atleast_1d(np.asarray(value, dtype=float))
        if t == 0.0:
            return cls([0.0], v[None, :])
        return cls([0.0, t], np.vstack([v, v]))

    @property
    def time(self) -> float:
        """Current time ``t`` of the stopped path."""
        return float(self.grid[-1])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def last(self) -> np.ndarray:
        return self.values[-1]

    def __len__(self) -> int:
        return self.grid.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Path):
            return NotImplemented
        return np.array_equal(self.grid, other.grid) and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.grid.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"Path(t={self.time:g}, nodes={len(self)}, dim={self.dim})"

    def key(self) -> tuple[bytes, bytes]:
        return self.grid.tobytes(), self.values.tobytes()


@dataclass(frozen=True)
class SimulationGrid:
    """Uniform grid ``t_start = s_0 < ... < s_steps = t_end``."""

    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        if self.steps < 0 or int(self.steps) != self.steps:
            raise ValueError("steps must be a non-negative integer")
        if self.steps == 0:
            if abs(self.t_end - self.t_start) > TIME_TOL:
                raise ValueError("a zero-step grid must have t_start == t_end")
        elif not self.t_start < self.t_end:
            raise ValueError("t_start must be < t_end")

    @classmethod
    def aligned(cls, t_start: float, horizon: float, step: float) -> SimulationGrid:
        """Grid on ``[t_start, horizon]`` whose spacing is ``step`` when it divides evenly.

        Otherwise the number of steps is rounded up and the spacing shrinks.
        """
        span = horizon - t_start
        if span < -TIME_TOL:
            raise ValueError(f"t_start={t_start} is beyond the horizon {horizon}")
        ratio = max(span, 0.0) / step
        n = round(ratio)
        if abs(ratio - n) > 1e-9:
            n = math.ceil(ratio)
        return cls(t_start, horizon if n else t_start, int(n))

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps if self.steps else 0.0

    @property
    def times(self) -> np.ndarray:
        if self.steps == 0:
            return np.array([self.t_start])
        t = self.t_start + self.dt * np.arange(self.steps + 1)
        t[-1] = self.t_end
        return t

    @property
    def step_offset(self) -> int:
        """Global index of the first step; aligned grids share noise through it."""
        if self.steps == 0:
            return 0
        return int(round(self.t_start / self.dt))


# --- scalar path operations -------------------------------------------------


def sup_norm(p: Path) -> float:
    """``sup_{s <= t} |gamma(s)|``; exact at the nodes for step paths."""
    return float(np.max(np.linalg.norm(p.values, axis=1)))


def _index_at(grid: np.ndarray, s) -> np.ndarray:
    return np.searchsorted(grid, s, side="right") - 1


def eval_path(p: Path, s: float) -> np.ndarray:
    """Right-continuous step lookup ``gamma(s)`` for ``0 <= s <= t``."""
    if s < 0.0 or s > p.time + TIME_TOL:
        raise ValueError(f"s={s} outside [0, {p.time}]")
    return p.values[_index_at(p.grid, min(s, p.time))].copy()


def d_infinity(a: Path, b: Path) -> float:
    """Distance between stopped paths, evaluated exactly on the merged grid."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    horizon = max(a.time, b.time)
    nodes = np.union1d(a.grid, b.grid)
    nodes = nodes[nodes <= horizon]
    va = a.values[_index_at(a.grid, np.minimum(nodes, a.time))]
    vb = b.values[_index_at(b.grid, np.minimum(nodes, b.time))]
    gap = np.max(np.linalg.norm(va - vb, axis=1))
    return float(gap + abs(a.time - b.time))


def vertical_bump(p: Path, x) -> Path:
    """Return ``gamma_t^x``: the same path with ``x`` added to the current value only."""
    x = np.broadcast_to(np.asarray(x, dtype=float), (p.dim,))
    values = p.values.copy()
    values[-1] = values[-1] + x
    return Path(p.grid, values)


def _flat_nodes(t: float, s: float, grid_step: float) -> np.ndarray:
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    count = max(1, math.ceil((s - t) / grid_step - 1e-9))
    nodes = t + grid_step * np.arange(1, count + 1)
    nodes[-1] = s
    return nodes


def flat_extension(p: Path, s: float, grid_step: float | None = None) -> Path:
    """Return ``gamma_{t,s}``: the path frozen at its current value on ``[t, s]``."""
    t = p.time
    if s < t - TIME_TOL:
        raise ValueError(f"cannot extend a path at time {t} back to {s}")
    if s <= t + TIME_TOL:
        return p
    nodes = _flat_nodes(t, s, grid_step if grid_step is not None else s - t)
    values = np.vstack([p.values, np.repeat(p.values[-1:], nodes.size, axis=0)])
    return Path(np.concatenate([p.grid, nodes]), values)


def _discretize_arrays(times, states, t, n, horizon):
    """Apply the n-block resampling to step paths ``states[..., len(times), dim]``.

    Nodes before ``t`` are kept; on ``[t_k ^ s, t_{k+1} ^ s)`` the value is the
    path at ``t_{k+1} ^ s``; at ``s`` itself the value is the path at ``s``.
    """
    s = times[-1]
    if s < t - TIME_TOL:
        raise ValueError(f"path time {s} precedes the discretization anchor {t}")
    if n < 1:
        raise ValueError("n must be a positive integer")
    bounds = t + (horizon - t) * np.arange(n + 1) / n
    bounds[-1] = horizon
    cut = np.minimum(bounds, s)
    nodes = np.union1d(times, cut[cut >= t - TIME_TOL])
    nodes = nodes[nodes <= s]
    # union1d can keep near-duplicates produced by arithmetic; merge them
    keep = np.concatenate([[True], np.diff(nodes) > TIME_TOL])
    nodes = nodes[keep]
    sample_at = nodes.copy()
    after = (nodes >= t - TIME_TOL) & (nodes < s - TIME_TOL)
    block = np.clip(np.searchsorted(bounds, nodes[after] + TIME_TOL, side="right") - 1, 0, n - 1)
    sample_at[after] = cut[block + 1]
    idx = np.searchsorted(times, sample_at + TIME_TOL, side="right") - 1
    return nodes, states[..., idx, :]


def discretize_n(p: Path, t: float, n: int, horizon: float) -> Path:
    """Piecewise-constant resampling of ``p`` on ``n`` equal blocks of ``[t, horizon]``.

    ``p`` must be stopped at some ``s >= t``; block endpoints are clipped at ``s``.
    """
    nodes, values = _discretize_arrays(p.grid, p.values, t, n, horizon)
    return Path(nodes, values)


# --- batches of paths sharing a history -------------------------------------


class PathBatch:
    """``N`` stopped paths sharing the history ``prefix`` on ``[0, t0)``.

    ``times[0] == t0 == prefix.time`` and ``states[:, j]`` is the value at
    ``times[j]``; ``states[:, 0]`` supersedes the prefix's last value.  Arrays are
    not copied, so an ensemble can expose its history at step ``k`` as a view.
    """

    __slots__ = ("prefix", "times", "states")

    def __init__(self, prefix: Path, times: np.ndarray, states: np.ndarray) -> None:
        if states.ndim != 3 or states.shape[1] != times.size:
            raise ValueError(f"states shape {states.shape} does not match {times.size} times")
        if abs(times[0] - prefix.time) > TIME_TOL:
            raise ValueError("batch times must start at the prefix time")
        self.prefix = prefix
        self.times = times
        self.states = states

    @classmethod
    def from_path(cls, p: Path) -> PathBatch:
        return cls(p, p.grid[-1:], p.values[None, -1:, :])

    @classmethod
    def from_paths(cls, paths: Sequence[Path]) -> PathBatch:
        """Stack paths that share a grid and a starting value into one batch."""
        first = paths[0]
        for q in paths[1:]:
            if not np.array_equal(q.grid, first.grid):
                raise ValueError("paths in a batch must share their grid")
            if not np.array_equal(q.values[0], first.values[0]):
                raise ValueError("paths in a batch must share their initial value")
        states = np.stack([q.values for q in paths])
        prefix = Path(first.grid[:1], first.values[:1])
        return cls(prefix, first.grid, states)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def time(self) -> float:
        return float(self.times[-1])

    def last(self) -> np.ndarray:
        return self.states[:, -1, :]

    def _past(self):
        # prefix values strictly before t0 and the cell widths they hold for
        return self.prefix.values[:-1], np.diff(self.prefix.grid)

    def integral(self) -> np.ndarray:
        """``int_0^t gamma(s) ds`` per path, shape ``(N, dim)``."""
        past, widths = self._past()
        out = np.zeros((self.size, self.dim))
        if widths.size:
            out += widths @ past
        dts = np.diff(self.times)
        if dts.size:
            out += np.einsum("j,ijd->id", dts, self.states[:, :-1, :])
        return out

    def running_max(self) -> np.ndarray:
        out = self.states.max(axis=1)
        past, _ = self._past()
        return np.maximum(out, past.max(axis=0)) if past.size else out

    def running_min(self) -> np.ndarray:
        out = self.states.min(axis=1)
        past, _ = self._past()
        return np.minimum(out, past.min(axis=0)) if past.size else out

    def sup_norm(self) -> np.ndarray:
        out = np.linalg.norm(self.states, axis=2).max(axis=1)
        past, _ = self._past()
        return np.maximum(out, np.linalg.norm(past, axis=1).max()) if past.size else out

    def value_at(self, s: float) -> np.ndarray:
        if s < 0 or s > self.time + TIME_TOL:
            raise ValueError(f"s={s} outside [0, {self.time}]")
        if s < self.times[0] - TIME_TOL:
            v = eval_path(self.prefix, s)
            return np.broadcast_to(v, (self.size, self.dim)).copy()
        j = int(np.searchsorted(self.times, s + TIME_TOL, side="right") - 1)
        return self.states[:, j, :].copy()

    def truncate(self, k: int) -> PathBatch:
        """History up to ``times[k]`` (a view)."""
        return PathBatch(self.prefix, self.times[: k + 1], self.states[:, : k + 1, :])

    def bump(self, x) -> PathBatch:
        """Vertical bump of every path's current value; ``x`` is ``(dim,)`` or ``(N, dim)``."""
        states = self.states.copy()
        states[:, -1, :] += np.asarray(x, dtype=float)
        return PathBatch(self.prefix, self.times, states)

    def extend_flat(self, s: float, grid_step: float | None = None) -> PathBatch:
        t = self.time
        if s < t - TIME_TOL:
            raise ValueError(f"cannot extend a batch at time {t} back to {s}")
        if s <= t + TIME_TOL:
            return self
        nodes = _flat_nodes(t, s, grid_step if grid_step is not None else s - t)
        tail = np.repeat(self.states[:, -1:, :], nodes.size, axis=1)
        return PathBatch(self.prefix, np.concatenate([self.times, nodes]), np.concatenate([self.states, tail], axis=1))

    def discretize(self, t: float, n: int, horizon: float) -> PathBatch:
        """Batch version of :func:`discretize_n`; requires ``t`` at or after the prefix time."""
        if t < self.times[0] - TIME_TOL:
            raise ValueError("discretization anchor precedes the shared prefix")
        nodes, states = _discretize_arrays(self.times, self.states, t, n, horizon)
        return PathBatch(self.prefix, nodes, states)

    def path(self, i: int) -> Path:
        grid = np.concatenate([self.prefix.grid[:-1], self.times])
        values = np.vstack([self.prefix.values[:-1], self.states[i]])
        return Path(grid, values)

    def __repr__(self) -> str:
        return f"PathBatch(N={self.size}, t={self.time:g}, ext_nodes={self.times.size})"


# --- CSV --------------------------------------------------------------------


def write_path_csv(p: Path, target) -> None:
    """Write ``time,value`` (or ``time,value_1,...``) rows with a header."""
    header = ["time", "value"] if p.dim == 1 else ["time"] + [f"value_{i + 1}" for i in range(p.dim)]
    own = isinstance(target, (str, FsPath))
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s, v in zip(p.grid, p.values):
            w.writerow([repr(float(s))] + [repr(float(x)) for x in v])
    finally:
        if own:
            fh.close()


def read_path_csv(source) -> Path:
    if isinstance(source, (str, FsPath)):
        with open(source, newline="") as fh:
            text = fh.read()
    else:
        text = source.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0] or rows[0][0].strip() != "time":
        raise ValueError("path CSV needs a header row starting with 'time'")
    body = [r for r in rows[1:] if r]
    data = np.array([[float(x) for x in r] for r in body])
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError("path CSV needs at least one data row with time and value columns")
    return Path(data[:, 0], data[:, 1:])
