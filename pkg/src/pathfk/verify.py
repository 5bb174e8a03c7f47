"""Numerical checks that a simulated value functional solves its path-dependent PDE.

Each check returns :class:`VerificationReport` rows carrying the statistic,
the tolerance it was held to and the full context needed to reproduce it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import SolverConfig, UFunctional, solve_bsde
from .derivatives import DerivativeConfig, horizontal_derivative, ito_residual, vertical_derivative, vertical_hessian
from .forward import ProblemSpec, concat_history, simulate_ensemble, simulate_from_increments, strong_error
from .functionals import PathFunctional
from .parallel import parallel_map
from .paths import Path, PathBatch, SimulationGrid, flat_extension, vertical_bump
from .rng import brownian_increments, derive_seed

__all__ = [
    "RegularityProbeConfig",
    "VerificationReport",
    "REPORT_COLUMNS",
    "discretization_convergence",
    "fit_slope",
    "flow_property_check",
    "ito_convergence_check",
    "moment_probe",
    "ppde_residual",
    "regularity_probe",
    "strong_order_check",
    "z_representation_check",
]

REPORT_COLUMNS = ["check", "problem", "statistic", "tolerance", "pass", "N", "steps", "seed", "epsilon", "delta"]

# Truncation budget per unit (eps^2 + delta) in the MC residual tolerance.
# On the closed-form problems the analytic residual stays below 0.01 (eps^2 + delta)
# (worst case: the forward time difference of the discounted value), so 1.0
# leaves two orders of magnitude of headroom.
C_TRUNC = 1.0
# O(dt) allowance for regression bias in the flow check.
FLOW_BIAS_C = 0.5
ANALYTIC_TOL = 1e-6
# relative size below which a difference of two u values is treated as rounding
_ROUNDING = 1e-11


@dataclass(frozen=True)
class VerificationReport:
    """Outcome of one check.

    For threshold checks ``passed == |statistic| <= tolerance``; for slope
    checks ``interval`` is set and ``passed`` means the statistic lies inside it
    (``tolerance`` then records the binding end of the interval).
    """

    check: str
    problem: str
    statistic: float
    tolerance: float
    passed: bool
    context: dict = field(default_factory=dict)
    interval: tuple[float, float] | None = None
    detail: dict = field(default_factory=dict, compare=False)

    def row(self) -> list[str]:
        c = self.context
        return [
            self.check,
            self.problem,
            _fmt(self.statistic),
            _fmt(self.tolerance),
            "true" if self.passed else "false",
            _fmt(c.get("N", "")),
            _fmt(c.get("steps", "")),
            _fmt(c.get("seed", "")),
            _fmt(c.get("epsilon", "")),
            _fmt(c.get("delta", "")),
        ]

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        bound = f"in [{self.interval[0]:g}, {self.interval[1]:g}]" if self.interval else f"<= {self.tolerance:.3g}"
        return f"[{tag}] {self.check} ({self.problem}): {self.statistic:.6g} {bound}"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _interval_report(check, problem, stat, lo, hi, context, detail=None) -> VerificationReport:
    ok = bool(lo <= stat <= hi) if not math.isnan(stat) else False
    binding = lo if math.isfinite(lo) else hi
    return VerificationReport(check, problem, float(stat), float(binding), ok, context, (lo, hi), detail or {})


def fit_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(np.log(x)) == 0:
        raise ValueError("insufficient spread to fit a slope")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _pair_stderr(values: np.ndarray, antithetic: bool) -> float:
    if antithetic:
        values = 0.5 * (values[0::2] + values[1::2])
    if values.shape[0] < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.shape[0]))


def _z_of(grad: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """``Z = D_x u^T sigma`` for scalar ``u``; shape ``(1, d)``."""
    return (grad @ sigma)[None, :]


def _h_at(spec: ProblemSpec, gamma: Path, y: float, z: np.ndarray) -> float:
    out = spec.h(gamma.time, gamma.last[None, :], np.array([[y]]), z[None])
    return float(np.asarray(out).reshape(-1)[0])


def _context(solver: SolverConfig | None, eps, delta, **extra) -> dict:
    c = {"N": solver.n_paths if solver else 0, "steps": solver.steps if solver else 0, "seed": solver.seed if solver else 0}
    c.update(epsilon=eps, delta=delta)
    c.update(extra)
    return c


# --- PDE residual -------------------------------------------------------------


def ppde_residual(
    spec: ProblemSpec,
    gamma: Path,
    solver: SolverConfig | None = None,
    deriv: DerivativeConfig | None = None,
    analytic_u: PathFunctional | None = None,
    bsde_identity_paths: int = 0,
    c_trunc: float = C_TRUNC,
) -> VerificationReport:
    """Residual of ``D_t u + 1/2 tr(sigma sigma^T D_xx u) + <b, D_x u> - h(gamma, u, D_x u^T sigma)``.

    With ``analytic_u`` the closed-form functional is differentiated directly
    (tolerance ``1e-6``) and, if ``bsde_identity_paths > 0``, the pair
    ``(u(X_s), D_x u^T sigma(X_s))`` is also checked against the backward
    equation along simulated paths.  Otherwise ``u`` is the Monte Carlo
    functional of ``solver`` and the tolerance is
    ``3 * stderr + c_trunc * (eps^2 + delta)``, where ``stderr`` comes from the
    per-path values pushed through the same finite-difference stencils.
    """
    if spec.value_dim != 1:
        raise ValueError("ppde_residual handles scalar value functionals")
    if deriv is None:
        delta = spec.T / solver.steps if solver else 1e-3
        deriv = DerivativeConfig(horizontal_step=delta)
    if gamma.time + deriv.horizontal_step > spec.T + 1e-12:
        raise ValueError("t + delta must not exceed the horizon")
    eps = float(deriv.epsilon(PathBatch.from_path(gamma))[0])
    delta = deriv.horizontal_step
    b = spec.b(gamma)
    sigma = spec.sigma(gamma)
    u = analytic_u if analytic_u is not None else UFunctional(spec, solver or SolverConfig())

    d_t = float(horizontal_derivative(u, gamma, deriv, horizon=spec.T))
    d_x = np.atleast_1d(vertical_derivative(u, gamma, deriv))
    d_xx = np.atleast_2d(vertical_hessian(u, gamma, deriv))
    u0 = u.value(gamma)
    z = _z_of(d_x, sigma)
    drv = _h_at(spec, gamma, u0, z)
    generator = 0.5 * float(np.trace(sigma @ sigma.T @ d_xx)) + float(b @ d_x)
    residual = d_t + generator - drv
    detail = {"D_t": d_t, "D_x": d_x.tolist(), "D_xx": d_xx.tolist(), "u": u0, "h": drv}

    if analytic_u is not None:
        tol = ANALYTIC_TOL
        passed = abs(residual) <= tol
        if bsde_identity_paths > 0:
            ident = _bsde_identity(spec, gamma, analytic_u, deriv, bsde_identity_paths, solver)
            detail["bsde_identity"] = ident
            passed = passed and ident["pass"]
        ctx = _context(solver, eps, delta, mode="analytic")
        return VerificationReport("pde_analytic", spec.name, residual, tol, bool(passed), ctx, None, detail)

    se = _residual_stderr(spec, gamma, u, deriv, sigma, b, u0, z, eps, delta)
    tol = 3.0 * se + c_trunc * (eps**2 + delta)
    detail.update(stderr=se, tolerance_formula=f"3*{se:.3e} + {c_trunc:g}*(eps^2+delta)")
    ctx = _context(u.config, eps, delta, mode="monte_carlo")
    return VerificationReport("pde", spec.name, residual, tol, bool(abs(residual) <= tol), ctx, None, detail)


def _residual_stderr(spec, gamma, u: UFunctional, deriv, sigma, b, u0, z, eps, delta) -> float:
    """Standard error of the residual, linearised per trajectory (common noise)."""
    n = gamma.dim
    P = lambda p: u.sample(p)[2][:, 0]  # noqa: E731
    p0 = P(gamma)
    d_t = (P(flat_extension(gamma, gamma.time + delta, deriv.horizontal_grid_step)) - p0) / delta
    unit = np.eye(n)
    d_x = np.empty((p0.size, n))
    d_xx = np.empty((p0.size, n, n))
    for i in range(n):
        up, dn = P(vertical_bump(gamma, eps * unit[i])), P(vertical_bump(gamma, -eps * unit[i]))
        d_x[:, i] = (up - dn) / (2 * eps)
        d_xx[:, i, i] = (up + dn - 2 * p0) / eps**2
        for j in range(i + 1, n):
            pp = P(vertical_bump(gamma, eps * (unit[i] + unit[j])))
            pm = P(vertical_bump(gamma, eps * (unit[i] - unit[j])))
            mp = P(vertical_bump(gamma, eps * (-unit[i] + unit[j])))
            mm = P(vertical_bump(gamma, -eps * (unit[i] + unit[j])))
            d_xx[:, i, j] = d_xx[:, j, i] = (pp - pm - mp + mm) / (4 * eps**2)
    # driver sensitivities by central differences around (u0, z)
    hy = (_h_at(spec, gamma, u0 + 1e-6, z) - _h_at(spec, gamma, u0 - 1e-6, z)) / 2e-6
    hz = np.empty(z.shape[1])
    for j in range(z.shape[1]):
        dz = np.zeros_like(z)
        dz[0, j] = 1e-6
        hz[j] = (_h_at(spec, gamma, u0, z + dz) - _h_at(spec, gamma, u0, z - dz)) / 2e-6
    per_path = (
        d_t
        + 0.5 * np.einsum("ij,pji->p", sigma @ sigma.T, d_xx)
        + d_x @ b
        - hy * p0
        - (d_x @ sigma) @ hz
    )
    return _pair_stderr(per_path, u.config.antithetic)


def _bsde_identity(spec, gamma, u: PathFunctional, deriv, n_paths, solver) -> dict:
    """``g(X_T) - u(gamma) - sum h dt - sum Z dW`` along simulated paths, with ``Z = D_x u^T sigma``."""
    steps_total = solver.steps if solver else 50
    seed = derive_seed(solver.seed if solver else 0, 0xB5DE)
    grid = SimulationGrid.aligned(gamma.time, spec.T, spec.T / steps_total)
    ens = simulate_ensemble(spec, gamma, grid, n_paths, seed)
    total = spec.g.batch(ens.full())[:, 0] - u.value(gamma)
    for k in range(grid.steps):
        hist = ens.history(k)
        dt = ens.times[k + 1] - ens.times[k]
        grad = np.atleast_2d(vertical_derivative(u, hist, deriv))  # (N, n)
        sig = spec.sigma.batch(hist)  # (N, n, d)
        zk = np.einsum("pi,pij->pj", grad, sig)[:, None, :]
        yk = u.batch(hist)
        total -= np.asarray(spec.h(ens.times[k], hist.last(), yk, zk)).reshape(-1) * dt
        total -= np.einsum("pj,pj->p", zk[:, 0, :], ens.dW[:, k, :])
    mean = float(total.mean())
    se = float(total.std(ddof=1) / math.sqrt(n_paths))
    tol = 4.0 * se + grid.dt
    return {"mean": mean, "stderr": se, "tolerance": tol, "pass": abs(mean) <= tol}


# --- flow property and Z representation ----------------------------------------


def _sample_pairs(seed: int, tag: int, n_paths: int, k_max: int, count: int):
    rng = np.random.default_rng(derive_seed(seed, tag))
    return list(zip(rng.integers(0, n_paths, count).tolist(), rng.integers(0, k_max + 1, count).tolist()))


def flow_property_check(
    spec: ProblemSpec,
    gamma: Path,
    solver: SolverConfig = SolverConfig(),
    samples: int = 100,
    inner: SolverConfig | None = None,
    bias_c: float = FLOW_BIAS_C,
) -> VerificationReport:
    """Compare regression ``Y[i][k]`` with a fresh ``u`` at the spliced history of path ``i`` at ``t_k``.

    Fresh evaluations use seeds independent of the outer ensemble.
    """
    uf = UFunctional(spec, solver)
    sol = uf.solve(gamma)
    ens = sol.ensemble
    pairs = _sample_pairs(solver.seed, 0xF10, ens.size, ens.steps, samples)
    inner = inner or solver

    def fresh(job):
        j, (i, k) = job
        hist = concat_history(gamma, ens, i, k)
        cfg = inner.replace(seed=derive_seed(solver.seed, 0xF11, j))
        val, se, _ = UFunctional(spec, cfg).sample(hist)
        return float(sol.Y[i, k, 0]), float(val[0]), se

    results = parallel_map(fresh, list(enumerate(pairs)))
    diffs = np.array([a - b for a, b, _ in results])
    stat = float(np.sqrt(np.mean(diffs**2)))
    combined = math.sqrt(np.mean([se**2 for _, _, se in results]) + sol.u_stderr**2)
    dt = ens.grid.dt
    tol = 3.0 * combined + bias_c * dt
    ctx = _context(solver, "", dt, samples=samples, inner_N=inner.n_paths)
    detail = {"pairs": pairs, "max_abs": float(np.max(np.abs(diffs))), "combined_stderr": combined}
    return VerificationReport("flow", spec.name, stat, tol, bool(stat <= tol), ctx, None, detail)


def z_representation_check(
    spec: ProblemSpec,
    gamma: Path,
    solver: SolverConfig = SolverConfig(),
    deriv: DerivativeConfig = DerivativeConfig(),
    samples: int = 100,
    inner: SolverConfig | None = None,
    tolerance: float = 0.1,
) -> VerificationReport:
    """Regression ``Z[i][k]`` against ``D_x u^T sigma`` at the spliced history.

    The statistic is the relative RMS error ``||Z - ref|| / ||ref||`` over the
    sampled pairs (0 when both sides vanish).
    """
    if spec.value_dim != 1:
        raise ValueError("z_representation_check handles scalar value functionals")
    uf = UFunctional(spec, solver)
    sol = uf.solve(gamma)
    ens = sol.ensemble
    if ens.steps == 0:
        raise ValueError("no time steps between gamma and the horizon")
    pairs = _sample_pairs(solver.seed, 0x2E9, ens.size, ens.steps - 1, samples)
    u_inner = UFunctional(spec, inner or solver)

    def reference(pair):
        i, k = pair
        hist = concat_history(gamma, ens, i, k)
        grad = np.atleast_1d(vertical_derivative(u_inner, hist, deriv))
        return _z_of(grad, spec.sigma(hist))[0]

    refs = np.array(parallel_map(reference, pairs))
    zs = np.array([sol.Z[i, k, 0] for i, k in pairs])
    num = float(np.sqrt(np.sum((zs - refs) ** 2)))
    den = float(np.sqrt(np.sum(refs**2)))
    stat = 0.0 if num == 0 else (num / den if den > 0 else math.inf)
    ctx = _context(solver, deriv.vertical_step if deriv.vertical_step else "", "", samples=samples)
    detail = {"pairs": pairs, "mean_Z": float(zs.mean()), "mean_ref": float(refs.mean())}
    return VerificationReport("zrep", spec.name, stat, tolerance, bool(stat <= tolerance), ctx, None, detail)


# --- regularity and moment probes ---------------------------------------------


@dataclass(frozen=True)
class RegularityProbeConfig:
    """Perturbation sizes and the admissible fitted exponents.

    ``pairs`` base paths are used per magnitude: ``gamma`` itself and
    ``gamma`` with its current value shifted by seeded offsets.
    """

    magnitudes: tuple[float, ...] = (0.01, 0.02, 0.04, 0.08)
    pairs: int = 1
    lipschitz_min: float = 0.9
    holder_min: float = 0.45
    scales: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    forward_exponent_max: float = 2.3
    q_max: float = 4.5
    offset_scale: float = 0.5

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=float)
        if np.any(mags <= 0) or np.any(np.diff(mags) <= 0):
            raise ValueError("magnitudes must be positive and increasing")
        if mags.size < 2 or mags[-1] / mags[0] < 2:
            raise ValueError("magnitudes need at least a factor 2 spread")
        if self.pairs < 1:
            raise ValueError("pairs must be >= 1")


def _slope_or_flat(mags, diffs, floor: float = 0.0) -> float:
    diffs = np.where(np.asarray(diffs) <= floor, 0.0, diffs)
    if np.all(diffs == 0):
        return math.inf  # no variation at all: any Hoelder bound holds
    if np.any(diffs == 0):
        return math.nan
    return fit_slope(mags, diffs)


def regularity_probe(
    spec: ProblemSpec,
    gamma: Path,
    solver: SolverConfig = SolverConfig(),
    cfg: RegularityProbeConfig = RegularityProbeConfig(),
    moments: bool = True,
) -> list[VerificationReport]:
    """Fitted exponents of ``|u(gamma) - u(gamma')|`` against ``d_infinity``.

    Returns the path-Lipschitz and time-Hoelder reports, followed by the two
    moment reports of :func:`moment_probe` when ``moments`` is set.
    """
    if spec.value_dim != 1:
        raise ValueError("regularity_probe handles scalar value functionals")
    uf = UFunctional(spec, solver)
    rng = np.random.default_rng(derive_seed(solver.seed, 0x4E6))
    offsets = np.vstack([np.zeros(gamma.dim), rng.uniform(-cfg.offset_scale, cfg.offset_scale, (cfg.pairs - 1, gamma.dim))])
    bases = [vertical_bump(gamma, o) for o in offsets]
    mags = np.asarray(cfg.magnitudes)
    if gamma.time + mags[-1] > spec.T:
        raise ValueError("largest time perturbation runs past the horizon")
    dt = spec.T / solver.steps

    def gaps(m):
        e = np.zeros(gamma.dim)
        e[0] = m
        space = np.mean([abs(uf.value(vertical_bump(p, e)) - uf.value(p)) for p in bases])
        time = np.mean([abs(uf.value(flat_extension(p, p.time + m, dt)) - uf.value(p)) for p in bases])
        return space, time

    res = np.array([gaps(m) for m in mags])
    # gaps at regression rounding level carry no slope information
    floor = _ROUNDING * max(1.0, float(np.mean([abs(uf.value(p)) for p in bases])))
    ctx = _context(solver, float(mags[0]), float(mags[0]), pairs=cfg.pairs)
    lip = _slope_or_flat(mags, res[:, 0], floor)
    hol = _slope_or_flat(mags, res[:, 1], floor)
    reports = [
        _interval_report("regularity_lipschitz", spec.name, lip, cfg.lipschitz_min, math.inf, ctx, {"magnitudes": mags.tolist(), "gaps": res[:, 0].tolist()}),
        _interval_report("regularity_holder", spec.name, hol, cfg.holder_min, math.inf, ctx, {"magnitudes": mags.tolist(), "gaps": res[:, 1].tolist()}),
    ]
    return reports + moment_probe(spec, gamma, solver, cfg) if moments else reports


def moment_probe(
    spec: ProblemSpec,
    gamma: Path,
    solver: SolverConfig = SolverConfig(),
    cfg: RegularityProbeConfig = RegularityProbeConfig(),
) -> list[VerificationReport]:
    """Fitted growth exponents of ``E sup|X|^2`` and ``E sup|Y|^2`` in ``||gamma||``."""
    norms, x_mom, y_mom = [], [], []
    for c in cfg.scales:
        g_c = Path(gamma.grid, c * gamma.values)
        sol = UFunctional(spec, solver).solve(g_c)
        full = sol.ensemble.full()
        norms.append(float(np.max(np.linalg.norm(g_c.values, axis=1))))
        x_mom.append(float(np.mean(full.sup_norm() ** 2)))
        y_mom.append(float(np.mean(np.max(np.sum(sol.Y**2, axis=2), axis=1))))
    norms = np.asarray(norms)
    if np.any(norms <= 0):
        raise ValueError("moment probe needs a path with non-zero sup norm")
    ctx = _context(solver, "", "", scales=list(cfg.scales))
    fx, fy = fit_slope(norms, x_mom), fit_slope(norms, y_mom)
    return [
        _interval_report("moment_forward", spec.name, fx, -math.inf, cfg.forward_exponent_max, ctx, {"norms": norms.tolist(), "moments": x_mom}),
        _interval_report("moment_backward", spec.name, fy, -math.inf, cfg.q_max, ctx, {"norms": norms.tolist(), "moments": y_mom}),
    ]


# --- discretization, Ito formula, strong order --------------------------------


def discretization_convergence(
    spec: ProblemSpec,
    gamma: Path,
    solver: SolverConfig = SolverConfig(),
    n_list=(1, 2, 4, 8, 16, 32, 64),
    n0: int = 1,
) -> VerificationReport:
    """``u^n`` with the terminal functional composed with the n-block resampling.

    All ``u^n`` share the ensemble of ``u``.  The error sequence checked for
    monotonicity is the per-path L2 distance ``sqrt(mean |v^n_i - v_i|^2)``
    of the trajectory values; the gap ``|u^n - u|`` at the largest ``n`` must
    be within 3 combined standard errors.  The driver depends on the path only
    through ``(t, gamma(t))``, which the resampling preserves, so ``h^n = h``.
    """
    uf = UFunctional(spec, solver)
    base = uf.solve(gamma)
    ens = base.ensemble
    t0 = gamma.time
    gaps, l2, l2_se, values, ses = [], [], [], [], []
    for n in n_list:
        g_n = spec.g.compose(lambda pb, n=n: pb.discretize(t0, n, spec.T), f"{spec.g.name}^({n})")
        sol = solve_bsde(spec.with_terminal(g_n), ens, solver.basis, solver.picard_iters)
        values.append(float(sol.u_value[0]))
        ses.append(sol.u_stderr)
        gaps.append(abs(float(sol.u_value[0] - base.u_value[0])))
        sq = np.sum((sol.pathwise - base.pathwise) ** 2, axis=1)
        l2.append(float(np.sqrt(sq.mean())))
        # delta method for the square root of a sample mean
        l2_se.append(float(sq.std(ddof=1) / math.sqrt(sq.size) / (2 * l2[-1])) if l2[-1] > 0 else 0.0)
    tail = np.asarray(l2)[[i for i, n in enumerate(n_list) if n >= n0]]
    scale = max(1.0, float(np.max(tail)) if tail.size else 1.0)
    monotone = bool(np.all(np.diff(tail) <= 1e-12 * scale))
    combined = math.sqrt(ses[-1] ** 2 + base.u_stderr**2)
    tol = 3.0 * combined
    passed = monotone and gaps[-1] <= tol
    ctx = _context(solver, "", "", n_list=list(n_list))
    detail = {"n": list(n_list), "gap": gaps, "l2": l2, "l2_stderr": l2_se, "u_n": values, "u": float(base.u_value[0]), "monotone": monotone}
    return VerificationReport("discretization", spec.name, gaps[-1], tol, bool(passed), ctx, None, detail)


def ito_convergence_check(
    F: PathFunctional,
    spec: ProblemSpec,
    gamma: Path,
    steps_list=(50, 100, 200),
    n_paths: int = 1000,
    seed: int = 0,
    vertical_step: float = 1e-4,
    target_ratio: float = 0.5,
    rel_tol: float = 0.3,
) -> VerificationReport:
    """Mean-square Ito residual of ``F`` along simulated trajectories under grid doubling.

    The residual RMS is O(dt^(1/2)), so its mean square should halve with each
    doubling of ``steps``; the statistic is the worst relative deviation of the
    successive mean-square ratios from ``target_ratio``.  All levels share one
    Brownian path (coarse increments are sums of fine ones).
    """
    steps_list = sorted(steps_list)
    finest = steps_list[-1]
    span = spec.T - gamma.time
    fine_grid = SimulationGrid(gamma.time, spec.T, finest)
    dW_fine = brownian_increments(seed, n_paths, 0, finest, spec.noise_dim, fine_grid.dt)
    ms, rms = [], []
    for s in steps_list:
        if finest % s:
            raise ValueError("steps_list entries must divide the finest level")
        grid = SimulationGrid(gamma.time, spec.T, s)
        dW = dW_fine.reshape(n_paths, s, finest // s, spec.noise_dim).sum(axis=2)
        ens = simulate_from_increments(spec, gamma, grid, dW)
        hists = [ens.history(k) for k in range(s)]
        sig = np.stack([spec.sigma.batch(h) for h in hists], axis=1)  # (N, s, n, d)
        sig_sq = np.einsum("pkij,pklj->pkil", sig, sig)
        cfg = DerivativeConfig(vertical_step=vertical_step, horizontal_step=span / s)
        res = ito_residual(F, ens.full(), sig_sq, cfg, horizon=spec.T)
        ms.append(float(np.mean(res**2)))
        rms.append(math.sqrt(ms[-1]))
    ratios = [ms[i + 1] / ms[i] for i in range(len(ms) - 1)] if all(m > 0 for m in ms[:-1]) else [math.nan]
    stat = max(abs(r / target_ratio - 1.0) for r in ratios)
    ctx = {"N": n_paths, "steps": finest, "seed": seed, "epsilon": vertical_step, "delta": span / finest}
    detail = {"steps": steps_list, "rms": rms, "mean_square": ms, "ratios": ratios}
    return VerificationReport("ito", spec.name, stat, rel_tol, bool(stat <= rel_tol), ctx, None, detail)


def strong_order_check(
    spec: ProblemSpec,
    gamma: Path,
    coarse_steps: int = 8,
    levels: int = 4,
    n_paths: int = 10_000,
    seed: int = 0,
    interval: tuple[float, float] = (0.35, 0.65),
) -> VerificationReport:
    """Log-log slope of the Euler strong error against the step size."""
    grid = SimulationGrid(gamma.time, spec.T, coarse_steps)
    pts = strong_error(spec, gamma, grid, levels, n_paths, seed)
    dts, errs = zip(*pts)
    if min(errs) == 0:
        slope = math.inf
    else:
        slope = fit_slope(dts, errs)
    ctx = {"N": n_paths, "steps": coarse_steps * 2 ** (levels - 1), "seed": seed, "epsilon": "", "delta": dts[-1]}
    return _interval_report("strong_order", spec.name, slope, interval[0], interval[1], ctx, {"dt": list(dts), "rms": list(errs)})
