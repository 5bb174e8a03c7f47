"""Path functionals: deterministic maps from stopped paths to arrays.

Every functional is evaluated on a :class:`~pathfk.paths.PathBatch` so the
solvers can call coefficients once per time step for the whole ensemble.
Calling a functional on a single :class:`~pathfk.paths.Path` wraps it in a
one-path batch.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .paths import Path, PathBatch

__all__ = [
    "PathFunctional",
    "constant",
    "current_time",
    "last_value",
    "running_integral",
    "running_max",
    "running_min",
    "from_last_value",
]


class PathFunctional:
    """A pure map ``Path -> R^shape``.

    Parameters
    ----------
    batch_fn : callable
        ``batch_fn(pb: PathBatch) -> array`` with leading axis ``pb.size``.
        Scalar functionals may return shape ``(N,)``; the result is reshaped
        to ``(N, *shape)``.
    shape : tuple of int
        Output shape per path, ``(n,)`` for drifts and terminal conditions,
        ``(n, d)`` for diffusion matrices.
    name : str
        Label used in reports.
    """

    def __init__(self, batch_fn: Callable[[PathBatch], np.ndarray], shape=(1,), name: str = "functional"):
        self._batch_fn = batch_fn
        self.shape = tuple(shape)
        self.name = name

    def batch(self, pb: PathBatch) -> np.ndarray:
        out = np.asarray(self._batch_fn(pb), dtype=float)
        if out.ndim == 0:
            out = np.broadcast_to(out, (pb.size,) + self.shape)
        return out.reshape((pb.size,) + self.shape)

    def __call__(self, p: Path | PathBatch) -> np.ndarray:
        if isinstance(p, PathBatch):
            return self.batch(p)
        return self.batch(PathBatch.from_path(p))[0].copy()

    def value(self, p: Path) -> float:
        """Scalar value for one-dimensional functionals."""
        out = self(p)
        if out.size != 1:
            raise ValueError(f"{self.name} is not scalar-valued (shape {self.shape})")
        return float(out.reshape(()))

    def __add__(self, other: PathFunctional) -> PathFunctional:
        return PathFunctional(lambda pb: self.batch(pb) + other.batch(pb), self.shape, f"({self.name}+{other.name})")

    def __mul__(self, c: float) -> PathFunctional:
        return PathFunctional(lambda pb: c * self.batch(pb), self.shape, f"{c:g}*{self.name}")

    __rmul__ = __mul__

    def compose(self, transform: Callable[[PathBatch], PathBatch], name: str | None = None) -> PathFunctional:
        """Functional ``p -> self(transform(p))``."""
        return PathFunctional(lambda pb: self.batch(transform(pb)), self.shape, name or f"{self.name}∘T")

    def __repr__(self) -> str:
        return f"PathFunctional({self.name!r}, shape={self.shape})"


def constant(c, shape=None, name: str | None = None) -> PathFunctional:
    c = np.asarray(c, dtype=float)
    shape = tuple(shape) if shape is not None else (c.shape or (1,))
    c = np.broadcast_to(c, shape)
    return PathFunctional(lambda pb: np.broadcast_to(c, (pb.size,) + shape), shape, name or f"const({c.ravel()[0]:g})")


def last_value(dim: int = 1) -> PathFunctional:
    return PathFunctional(lambda pb: pb.last(), (dim,), "gamma(t)")


def current_time() -> PathFunctional:
    return PathFunctional(lambda pb: np.full(pb.size, pb.time), (1,), "t")


def running_integral(dim: int = 1) -> PathFunctional:
    return PathFunctional(lambda pb: pb.integral(), (dim,), "int gamma")


def running_max(dim: int = 1) -> PathFunctional:
    return PathFunctional(lambda pb: pb.running_max(), (dim,), "max gamma")


def running_min(dim: int = 1) -> PathFunctional:
    return PathFunctional(lambda pb: pb.running_min(), (dim,), "min gamma")


def from_last_value(fn: Callable[[float, np.ndarray], np.ndarray], shape=(1,), name: str = "phi(t, gamma(t))") -> PathFunctional:
    """Functional that factors through ``(t, gamma(t))``; ``fn(t, x)`` gets ``x`` of shape ``(N, dim)``."""
    return PathFunctional(lambda pb: fn(pb.time, pb.last()), shape, name)
