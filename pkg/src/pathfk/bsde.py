"""Regression Monte Carlo for backward SDEs driven by path-dependent forwards.

Sign convention: ``dY = h(X_s, Y, Z) ds + Z dW`` with ``Y(T) = g(X_T)``, so one
backward Euler step reads

    Z_k = E_k[(Y_{k+1} - E_k Y_{k+1}) dW_k] / dt
    Y_k = E_k[Y_{k+1}] - h(t_k, X_k, Y_k, Z_k) dt        (implicit in Y)

with ``E_k`` realised by least squares on features of the history at ``t_k``.
At the initial time the history is deterministic, so ``E_0`` is the plain
ensemble mean and ``u(gamma_t) = Y(t)``.
"""

from __future__ import annotations

import csv
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .forward import PathEnsemble, ProblemSpec, simulate_ensemble
from .functionals import PathFunctional
from .paths import Path, PathBatch, SimulationGrid, vertical_bump

__all__ = [
    "BsdeSolution",
    "DifferenceQuotient",
    "RegressionBasis",
    "SingularRegressionError",
    "SolverConfig",
    "UFunctional",
    "difference_quotient_y",
    "evaluate_u",
    "solve_bsde",
]

FEATURES = ("constant", "value", "value_sq", "integral", "running_max", "running_min", "anchor")
DEFAULT_FEATURES = ("constant", "value", "value_sq", "integral", "running_max")

_CHUNK = 16384


class SingularRegressionError(np.linalg.LinAlgError):
    def __init__(self, step: int, condition: float):
        super().__init__(f"regression at step {step} is singular (condition number {condition:.3e})")
        self.step = step
        self.condition = condition


@dataclass(frozen=True)
class RegressionBasis:
    """Feature extractors for conditional expectations given the history at ``t_k``."""

    features: tuple[str, ...] = DEFAULT_FEATURES

    def __post_init__(self):
        unknown = set(self.features) - set(FEATURES)
        if unknown:
            raise ValueError(f"unknown regression features: {sorted(unknown)}")
        if not self.features:
            raise ValueError("regression basis is empty")

    def size(self, dim: int) -> int:
        return sum(1 if f == "constant" else dim for f in self.features)

    def check(self, n_paths: int, dim: int) -> None:
        if self.size(dim) > n_paths / 20:
            raise ValueError(f"{self.size(dim)} regression features need at least {20 * self.size(dim)} paths, got {n_paths}")

    def matrix(self, pb: PathBatch) -> np.ndarray:
        return self._assemble(pb.size, pb.dim, pb.last, pb.integral, pb.running_max, pb.running_min, lambda: pb.states[:, 0, :])

    def _assemble(self, N, dim, last, integral, rmax, rmin, anchor) -> np.ndarray:
        cols = []
        for f in self.features:
            if f == "constant":
                cols.append(np.ones((N, 1)))
            elif f == "value":
                cols.append(last())
            elif f == "value_sq":
                cols.append(last() ** 2)
            elif f == "integral":
                cols.append(integral())
            elif f == "running_max":
                cols.append(rmax())
            elif f == "running_min":
                cols.append(rmin())
            elif f == "anchor":
                cols.append(np.broadcast_to(anchor(), (N, dim)))
        phi = np.hstack(cols)
        if not np.all(np.isfinite(phi)):
            raise FloatingPointError("non-finite regression feature")
        return phi


class _Tracks:
    """Time-major copies of the states and their running integral/max/min.

    Features at step ``k`` are then contiguous O(N) slices.
    """

    def __init__(self, ens: PathEnsemble, features):
        hist0 = ens.history(0)
        st = np.ascontiguousarray(ens.states.transpose(1, 0, 2))  # (steps + 1, N, n)
        self.states = st
        if "integral" in features:
            dts = np.diff(ens.times)
            self.integral = np.empty_like(st)
            self.integral[0] = hist0.integral()
            np.cumsum(st[:-1] * dts[:, None, None], axis=0, out=self.integral[1:])
            self.integral[1:] += self.integral[0]
        if "running_max" in features:
            self.rmax = np.maximum.accumulate(st, axis=0)
            np.maximum(self.rmax, hist0.running_max(), out=self.rmax)
        if "running_min" in features:
            self.rmin = np.minimum.accumulate(st, axis=0)
            np.minimum(self.rmin, hist0.running_min(), out=self.rmin)

    def matrix(self, basis: RegressionBasis, k: int) -> np.ndarray:
        st = self.states
        return basis._assemble(
            st.shape[1],
            st.shape[2],
            lambda: st[k],
            lambda: self.integral[k],
            lambda: self.rmax[k],
            lambda: self.rmin[k],
            lambda: st[0],
        )


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` accumulated over fixed row chunks in order."""
    out = np.zeros((a.shape[1], b.shape[1]))
    for s in range(0, a.shape[0], _CHUNK):
        out += a[s : s + _CHUNK].T @ b[s : s + _CHUNK]
    return out


class _LeastSquares:
    """Ridge-damped normal equations on RMS-scaled features."""

    def __init__(self, phi: np.ndarray, step: int, ridge: float, max_condition: float):
        scale = np.sqrt(np.mean(phi**2, axis=0))
        scale[scale == 0] = 1.0
        self.phi = phi / scale
        n = phi.shape[0]
        gram = _cross(self.phi, self.phi) / n
        # one constant column stays undamped so fitted values keep the target mean
        damp = np.full(gram.shape[0], ridge * np.trace(gram))
        flat = np.flatnonzero(np.ptp(phi, axis=0) == 0)
        if flat.size:
            damp[flat[0]] = 0.0
        gram += np.diag(damp)
        self.condition = float(np.linalg.cond(gram))
        if not np.isfinite(self.condition) or self.condition > max_condition:
            raise SingularRegressionError(step, self.condition)
        self.gram = gram
        self.n = n

    def predict(self, target: np.ndarray) -> np.ndarray:
        coef = np.linalg.solve(self.gram, _cross(self.phi, target) / self.n)
        return self.phi @ coef


class _Mean:
    condition = 1.0

    def predict(self, target: np.ndarray) -> np.ndarray:
        return np.broadcast_to(target.mean(axis=0), target.shape).copy()


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Backward processes on an ensemble.

    ``pathwise[i]`` is ``g(X^i) - sum_k h_k^i dt``, the per-trajectory value
    whose ensemble spread gives ``u_stderr``.
    """

    Y: np.ndarray  # (N, steps + 1, m)
    Z: np.ndarray  # (N, steps, m, d)
    u_value: np.ndarray  # (m,)
    u_stderr: float
    pathwise: np.ndarray  # (N, m)
    ensemble: PathEnsemble = field(repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    def to_csv(self, target) -> None:
        """Rows ``path_id,step,time,Y,Z`` (components suffixed ``_i`` / ``_i_j`` when not scalar)."""
        N, S1, m = self.Y.shape
        d = self.Z.shape[3]
        y_cols = ["Y"] if m == 1 else [f"Y_{i + 1}" for i in range(m)]
        z_cols = ["Z"] if m * d == 1 else [f"Z_{i + 1}_{j + 1}" for i in range(m) for j in range(d)]
        times = self.ensemble.times
        own = not hasattr(target, "write")
        fh = open(target, "w", newline="") if own else target
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "step", "time"] + y_cols + z_cols)
            for i in range(N):
                for k in range(S1):
                    z = [repr(float(v)) for v in self.Z[i, k].ravel()] if k < S1 - 1 else [""] * (m * d)
                    w.writerow([i, k, repr(float(times[k]))] + [repr(float(v)) for v in self.Y[i, k]] + z)
        finally:
            if own:
                fh.close()


def _stderr(values: np.ndarray, antithetic: bool) -> float:
    """Standard error of the mean of ``values`` ``(N, m)``, largest over components."""
    if antithetic:
        values = 0.5 * (values[0::2] + values[1::2])
    n = values.shape[0]
    if n < 2:
        return 0.0
    return float(np.max(values.std(axis=0, ddof=1)) / np.sqrt(n))


def solve_bsde(
    spec: ProblemSpec,
    ens: PathEnsemble,
    basis: RegressionBasis = RegressionBasis(),
    picard_iters: int = 3,
    picard_tol: float = 0.0,
    ridge: float = 1e-8,
    max_condition: float = 1e10,
) -> BsdeSolution:
    """Backward induction with least-squares conditional expectations."""
    if picard_iters < 1:
        raise ValueError("picard_iters must be >= 1")
    N, steps = ens.size, ens.steps
    m, d = spec.value_dim, spec.noise_dim
    times = ens.times
    # time-major work arrays; transposed to (N, steps, ...) at the end
    Y = np.empty((steps + 1, N, m))
    Z = np.zeros((steps, N, m, d))
    Y[-1] = spec.g.batch(ens.full())
    if not np.all(np.isfinite(Y[-1])):
        raise FloatingPointError("non-finite terminal value")
    if steps > 0 and N > 1:
        basis.check(N, spec.state_dim)
    conditions = np.ones(steps)
    updates = np.zeros(steps)
    drift_sum = np.zeros((N, m))
    tracks = _Tracks(ens, basis.features)
    dW = np.ascontiguousarray(ens.dW.transpose(1, 0, 2))
    for k in range(steps - 1, -1, -1):
        dt = times[k + 1] - times[k]
        fit = _Mean() if k == 0 else _LeastSquares(tracks.matrix(basis, k), k, ridge, max_condition)
        conditions[k] = fit.condition
        y_next = Y[k + 1]
        ey = fit.predict(y_next)
        innov = (y_next - ey)[:, :, None] * dW[k][:, None, :]
        z = fit.predict(innov.reshape(N, m * d)).reshape(N, m, d) / dt
        x = tracks.states[k]
        y = ey
        upd = 0.0
        for _ in range(picard_iters):
            drv = np.asarray(spec.h(times[k], x, y, z), dtype=float).reshape(N, m)
            if not np.all(np.isfinite(drv)):
                raise FloatingPointError(f"non-finite driver at step {k}")
            y_new = ey - drv * dt
            upd = float(np.max(np.abs(y_new - y)))
            y = y_new
            if upd <= picard_tol:
                break
        updates[k] = upd
        Y[k] = y
        Z[k] = z
        drift_sum += np.asarray(spec.h(times[k], x, y, z), dtype=float).reshape(N, m) * dt
    pathwise = Y[-1] - drift_sum
    u_value = Y[0, 0].copy()
    Y = np.ascontiguousarray(Y.transpose(1, 0, 2))
    Z = np.ascontiguousarray(Z.transpose(1, 0, 2, 3))
    return BsdeSolution(
        Y=Y,
        Z=Z,
        u_value=u_value,
        u_stderr=_stderr(pathwise, ens.antithetic),
        pathwise=pathwise,
        ensemble=ens,
        diagnostics={"condition": conditions, "picard_update": updates, "basis": basis.features},
    )


def evaluate_u(
    spec: ProblemSpec,
    gamma: Path,
    grid: SimulationGrid,
    n_paths: int,
    seed: int,
    basis: RegressionBasis = RegressionBasis(),
    picard_iters: int = 3,
    antithetic: bool = False,
):
    """Estimate ``u(gamma_t) = Y^{gamma_t}(t)``; returns ``(value, stderr)``.

    The value is a float for scalar problems and an array otherwise.
    """
    sol = solve_bsde(spec, simulate_ensemble(spec, gamma, grid, n_paths, seed, antithetic), basis, picard_iters)
    value = float(sol.u_value[0]) if spec.value_dim == 1 else sol.u_value
    return value, sol.u_stderr


@dataclass(frozen=True)
class SolverConfig:
    """Monte Carlo settings for ``u`` as a functional of arbitrary stopped paths.

    ``steps`` counts Euler steps over ``[0, T]``; a path stopped at ``t`` is
    solved on ``[t, T]`` with the same spacing, so every evaluation shares the
    global step index and hence the noise.
    """

    n_paths: int = 100_000
    steps: int = 50
    seed: int = 20240101
    basis: RegressionBasis = RegressionBasis()
    picard_iters: int = 3
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 1 or self.steps < 1:
            raise ValueError("n_paths and steps must be positive")

    def grid_for(self, gamma: Path, T: float) -> SimulationGrid:
        return SimulationGrid.aligned(gamma.time, T, T / self.steps)

    def replace(self, **kw) -> SolverConfig:
        return replace(self, **kw)


class UFunctional(PathFunctional):
    """``gamma_t -> u(gamma_t)`` by simulation; every call reuses the same seed.

    Results are cached per path so that finite-difference stencils and the
    checks built on them do not re-simulate identical points.
    """

    def __init__(self, spec: ProblemSpec, config: SolverConfig = SolverConfig(), cache_size: int = 256):
        super().__init__(self._batch, (spec.value_dim,), f"u[{spec.name}]")
        self.spec = spec
        self.config = config
        self.horizon = spec.T
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def solve(self, gamma: Path) -> BsdeSolution:
        cfg = self.config
        ens = simulate_ensemble(self.spec, gamma, cfg.grid_for(gamma, self.spec.T), cfg.n_paths, cfg.seed, cfg.antithetic)
        return solve_bsde(self.spec, ens, cfg.basis, cfg.picard_iters)

    def sample(self, gamma: Path) -> tuple[np.ndarray, float, np.ndarray]:
        """``(u_value, u_stderr, pathwise)`` at ``gamma``."""
        key = gamma.key()
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        sol = self.solve(gamma)
        out = (sol.u_value, sol.u_stderr, sol.pathwise)
        with self._lock:
            self._cache[key] = out
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return out

    def _batch(self, pb: PathBatch) -> np.ndarray:
        return np.stack([self.sample(pb.path(i))[0] for i in range(pb.size)])


@dataclass(frozen=True)
class DifferenceQuotient:
    """``(Y^{gamma^{h e_i}} - Y^{gamma}) / h`` and the same for ``Z``, per path and time."""

    y: np.ndarray  # (N, steps + 1, m)
    z: np.ndarray  # (N, steps, m, d)

    def y_mean(self) -> np.ndarray:
        return self.y.mean(axis=0)

    def z_mean(self) -> np.ndarray:
        return self.z.mean(axis=0)


def difference_quotient_y(
    spec: ProblemSpec,
    gamma: Path,
    direction: int,
    step: float,
    grid: SimulationGrid,
    n_paths: int,
    seed: int,
    basis: RegressionBasis = RegressionBasis(),
    picard_iters: int = 3,
    antithetic: bool = False,
) -> DifferenceQuotient:
    """Difference quotients of ``(Y, Z)`` under a bump of size ``step`` along basis vector ``direction``.

    Both solves use the same seed, hence identical Brownian increments.
    """
    if step == 0:
        raise ValueError("step must be non-zero")
    if not 0 <= direction < gamma.dim:
        raise ValueError(f"direction {direction} out of range for dimension {gamma.dim}")
    e = np.zeros(gamma.dim)
    e[direction] = step
    base = solve_bsde(spec, simulate_ensemble(spec, gamma, grid, n_paths, seed, antithetic), basis, picard_iters)
    bumped = solve_bsde(spec, simulate_ensemble(spec, vertical_bump(gamma, e), grid, n_paths, seed, antithetic), basis, picard_iters)
    return DifferenceQuotient((bumped.Y - base.Y) / step, (bumped.Z - base.Z) / step)
