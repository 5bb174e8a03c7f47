"""Finite-difference estimators of vertical and horizontal path derivatives.

All estimators accept either a single :class:`~pathfk.paths.Path` or a
:class:`~pathfk.paths.PathBatch`; batch inputs return one estimate per path.
The functional is always evaluated on bumped copies of the same path, so when
it is a Monte Carlo functional with a fixed seed the differences are taken
under common random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functionals import PathFunctional
from .paths import TIME_TOL, Path, PathBatch

__all__ = [
    "DerivativeConfig",
    "NonFiniteEvaluation",
    "horizontal_derivative",
    "ito_residual",
    "vertical_derivative",
    "vertical_hessian",
]


class NonFiniteEvaluation(ArithmeticError):
    pass


@dataclass(frozen=True)
class DerivativeConfig:
    """Step sizes for the estimators.

    ``vertical_step=None`` means ``1e-4 * max(1, ||gamma||)`` per path.
    ``horizontal_grid_step=None`` means a single flat cell of width
    ``horizontal_step``.
    """

    vertical_step: float | None = None
    horizontal_step: float = 1e-3
    horizontal_grid_step: float | None = None

    def __post_init__(self):
        if self.vertical_step is not None and not self.vertical_step > 0:
            raise ValueError("vertical_step must be positive")
        if not self.horizontal_step > 0:
            raise ValueError("horizontal_step must be positive")
        if self.horizontal_grid_step is not None:
            if not self.horizontal_grid_step > 0:
                raise ValueError("horizontal_grid_step must be positive")
            ratio = self.horizontal_step / self.horizontal_grid_step
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError("horizontal_step must be an integer multiple of horizontal_grid_step")

    def epsilon(self, pb: PathBatch) -> np.ndarray:
        if self.vertical_step is not None:
            return np.full(pb.size, self.vertical_step)
        return 1e-4 * np.maximum(1.0, pb.sup_norm())


def _as_batch(p):
    return (p, False) if isinstance(p, PathBatch) else (PathBatch.from_path(p), True)


def _eval(F: PathFunctional, pb: PathBatch) -> np.ndarray:
    out = F.batch(pb)
    if not np.all(np.isfinite(out)):
        raise NonFiniteEvaluation(f"{F.name} returned a non-finite value")
    return out


def _squeeze_scalar(F, arr):
    # scalar functionals: drop the trailing output axis
    return arr[:, 0] if F.shape == (1,) else arr


def vertical_derivative(F: PathFunctional, p, cfg: DerivativeConfig = DerivativeConfig()):
    """Central difference ``(F(gamma^{+eps e_i}) - F(gamma^{-eps e_i})) / (2 eps)``.

    Returns shape ``(n,)`` for a path and ``(N, n)`` for a batch (scalar ``F``);
    vector-valued ``F`` gets an extra leading output axis ``(..., m, n)``.
    """
    pb, single = _as_batch(p)
    eps = cfg.epsilon(pb)
    n = pb.dim
    cols = []
    for i in range(n):
        e = np.zeros((pb.size, n))
        e[:, i] = eps
        up = _eval(F, pb.bump(e))
        down = _eval(F, pb.bump(-e))
        cols.append((up - down) / (2.0 * eps.reshape((-1,) + (1,) * (up.ndim - 1))))
    grad = np.stack(cols, axis=-1)  # (N, *F.shape, n)
    grad = _squeeze_scalar(F, grad)
    return grad[0] if single else grad


def vertical_hessian(F: PathFunctional, p, cfg: DerivativeConfig = DerivativeConfig()):
    """Second central differences on the diagonal, 4-point cross stencil off it.

    The result is symmetrized.  ``F`` must be scalar-valued.
    """
    if F.shape != (1,):
        raise ValueError("vertical_hessian needs a scalar functional")
    pb, single = _as_batch(p)
    eps = cfg.epsilon(pb)
    n = pb.dim
    f0 = _eval(F, pb)[:, 0]
    hess = np.empty((pb.size, n, n))

    def bumped(i, si, j=None, sj=0.0):
        x = np.zeros((pb.size, n))
        x[:, i] += si * eps
        if j is not None:
            x[:, j] += sj * eps
        return _eval(F, pb.bump(x))[:, 0]

    for i in range(n):
        hess[:, i, i] = (bumped(i, 1.0) + bumped(i, -1.0) - 2.0 * f0) / eps**2
        for j in range(i + 1, n):
            cross = bumped(i, 1, j, 1) - bumped(i, 1, j, -1) - bumped(i, -1, j, 1) + bumped(i, -1, j, -1)
            hess[:, i, j] = hess[:, j, i] = cross / (4.0 * eps**2)
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    return hess[0] if single else hess


def horizontal_derivative(F: PathFunctional, p, cfg: DerivativeConfig = DerivativeConfig(), horizon: float | None = None):
    """Forward difference ``(F(gamma_{t,t+delta}) - F(gamma_t)) / delta`` along the flat extension."""
    pb, single = _as_batch(p)
    delta = cfg.horizontal_step
    horizon = horizon if horizon is not None else getattr(F, "horizon", None)
    if horizon is not None and pb.time + delta > horizon + TIME_TOL:
        raise ValueError(f"t + delta = {pb.time + delta} exceeds the horizon {horizon}")
    ext = pb.extend_flat(pb.time + delta, cfg.horizontal_grid_step)
    out = _squeeze_scalar(F, (_eval(F, ext) - _eval(F, pb)) / delta)
    return out[0] if single else out


def ito_residual(
    F: PathFunctional,
    traj,
    sigma_sq,
    cfg: DerivativeConfig = DerivativeConfig(),
    quadratic_variation: str = "model",
    horizon: float | None = None,
):
    """Pathwise remainder of the functional Ito expansion of ``F`` along ``traj``.

    ``traj`` is a path (or a batch of full trajectories from a single starting
    point) on a uniform grid; ``sigma_sq[k]`` is the quadratic-variation density
    ``sigma sigma^T`` on step ``k`` (shape ``(K,)`` or ``(K, n, n)``, with a
    leading path axis for batches).  Derivatives are evaluated at the truncated
    paths ``X_{t_k}``.  ``quadratic_variation="realized"`` uses ``dX dX^T``
    instead of the model density.
    """
    if F.shape != (1,):
        raise ValueError("ito_residual needs a scalar functional")
    if isinstance(traj, Path):
        pb = PathBatch(Path(traj.grid[:1], traj.values[:1]), traj.grid, traj.values[None])
        single = True
        sigma_sq = np.asarray(sigma_sq, dtype=float)[None]
    else:
        pb, single = traj, False
        sigma_sq = np.asarray(sigma_sq, dtype=float)
    times = pb.times
    K = times.size - 1
    n = pb.dim
    if K < 1:
        raise ValueError("trajectory needs at least one step")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise ValueError("ito_residual expects a uniform grid")
    if sigma_sq.shape[:2] != (pb.size, K):
        raise ValueError(f"sigma_sq has {sigma_sq.shape[1] if sigma_sq.ndim > 1 else 0} steps, trajectory has {K}")
    if sigma_sq.ndim == 2:
        sigma_sq = sigma_sq[:, :, None, None] * np.eye(n)
    dt = dts[0]
    total = np.zeros(pb.size)
    for k in range(K):
        head = pb.truncate(k)
        dx = pb.states[:, k + 1, :] - pb.states[:, k, :]
        d_s = horizontal_derivative(F, head, cfg, horizon=horizon)
        d_x = vertical_derivative(F, head, cfg)
        d_xx = vertical_hessian(F, head, cfg)
        if quadratic_variation == "model":
            qv = sigma_sq[:, k] * dt
        elif quadratic_variation == "realized":
            qv = dx[:, :, None] * dx[:, None, :]
        else:
            raise ValueError(f"unknown quadratic_variation {quadratic_variation!r}")
        total += d_s * dt + np.einsum("ij,ij->i", d_x, dx) + 0.5 * np.einsum("ijk,ijk->i", d_xx, qv)
    start = _eval(F, pb.truncate(0))[:, 0]
    end = _eval(F, pb)[:, 0]
    res = end - start - total
    return float(res[0]) if single else res

