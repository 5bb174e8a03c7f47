"""``pathfk`` command line: verification runs, convergence sweeps, ensemble export.

Configuration files hold ``key = value`` lines; ``#`` starts a comment and a
repeated key makes a list.  CSV outputs contain no run-dependent content, so
repeated runs produce identical bytes; timestamps and the thread count go to
``meta.txt``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import math
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .bsde import RegressionBasis, SolverConfig, UFunctional
from .derivatives import DerivativeConfig, vertical_derivative
from .parallel import thread_count
from .paths import Path, read_path_csv, vertical_bump
from .problems import ProblemRegistryEntry, UnknownProblem, get_problem, registry_builtin
from .verify import (
    REPORT_COLUMNS,
    RegularityProbeConfig,
    VerificationReport,
    discretization_convergence,
    fit_slope,
    flow_property_check,
    ito_convergence_check,
    moment_probe,
    ppde_residual,
    regularity_probe,
    strong_order_check,
    z_representation_check,
)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3

CHECKS = ("pde", "pde_analytic", "flow", "zrep", "regularity", "moments", "discretization", "ito", "strong_order")
AXES = ("steps", "N", "n_discretization", "epsilon")
CONVERGENCE_COLUMNS = ["parameter", "value", "error", "stderr"]


class ConfigError(ValueError):
    """Config refers to unknown names or holds invalid values (exit code 2)."""


def parse_config_text(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out.setdefault(key, []).append(value)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    gamma: Path
    n_paths: int = 100_000
    steps: int = 50
    seed: int = 20240101
    epsilon: float | None = None
    delta: float | None = None
    checks: tuple[str, ...] = ("pde", "flow", "zrep")
    output: FsPath = FsPath("pathfk_out")
    samples: int = 100
    antithetic: bool = False
    picard_iters: int = 3
    features: tuple[str, ...] = RegressionBasis().features
    n_list: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    magnitudes: tuple[float, ...] = (0.01, 0.02, 0.04, 0.08)
    scales: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    ito_steps: tuple[int, ...] = (50, 100, 200)
    ito_paths: int = 1000
    strong_coarse_steps: int = 8
    strong_levels: int = 4
    strong_paths: int = 10_000
    sweeps: dict = field(default_factory=dict)

    def solver(self) -> SolverConfig:
        return SolverConfig(self.n_paths, self.steps, self.seed, RegressionBasis(self.features), self.picard_iters, self.antithetic)

    def deriv(self, T: float) -> DerivativeConfig:
        return DerivativeConfig(self.epsilon, self.delta if self.delta is not None else T / self.steps)


def _one(raw, key, conv, default):
    vals = raw.get(key)
    if not vals:
        return default
    if len(vals) > 1:
        raise ConfigError(f"{key!r} given more than once")
    try:
        return conv(vals[0])
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _many(raw, key, conv, default):
    vals = raw.get(key)
    if not vals:
        return default
    try:
        return tuple(conv(x) for v in vals for x in v.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _gamma_nodes(vals: list[str]) -> Path:
    """Inline nodes ``time: v1 v2 ...``, one per ``gamma`` line."""
    grid, values = [], []
    for v in vals:
        if ":" not in v:
            raise ConfigError(f"gamma node {v!r} must look like 'time: value'")
        t, x = v.split(":", 1)
        try:
            grid.append(float(t))
            values.append([float(c) for c in x.replace(",", " ").split()])
        except ValueError as exc:
            raise ConfigError(f"gamma: {exc}") from None
    try:
        return Path(grid, values)
    except ValueError as exc:
        raise ConfigError(f"gamma: {exc}") from None


_KNOWN = {
    "problem", "gamma", "gamma_file", "N", "steps", "seed", "epsilon", "delta", "checks", "output", "samples",
    "antithetic", "picard_iters", "features", "n_list", "magnitudes", "scales", "ito_steps", "ito_paths",
    "strong_coarse_steps", "strong_levels", "strong_paths",
} | {f"sweep_{a}" for a in AXES}


def build_config(raw: dict[str, list[str]], base_dir: FsPath, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a parsed key-value mapping.  Raises :class:`ConfigError` or ``OSError``."""
    unknown = sorted(set(raw) - _KNOWN)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    problem = _one(raw, "problem", str, None)
    if problem is None:
        raise ConfigError("'problem' is required")
    try:
        get_problem(problem)
    except UnknownProblem:
        raise ConfigError(f"unknown problem {problem!r}; see 'pathfk list-problems'") from None
    if "gamma" in raw and "gamma_file" in raw:
        raise ConfigError("give either 'gamma' or 'gamma_file', not both")
    if "gamma_file" in raw:
        gamma = read_path_csv(base_dir / _one(raw, "gamma_file", str, ""))
    elif "gamma" in raw:
        gamma = _gamma_nodes(raw["gamma"])
    else:
        gamma = Path.constant(1.0)
    checks = _many(raw, "checks", str, ExperimentConfig.checks)
    bad = [c for c in checks if c not in CHECKS]
    if bad:
        raise ConfigError(f"unknown checks: {', '.join(bad)} (known: {', '.join(CHECKS)})")
    sweeps = {a: _many(raw, f"sweep_{a}", int if a in ("steps", "N", "n_discretization") else float, ()) for a in AXES}
    cfg = ExperimentConfig(
        problem=problem,
        gamma=gamma,
        n_paths=_one(raw, "N", int, ExperimentConfig.n_paths),
        steps=_one(raw, "steps", int, ExperimentConfig.steps),
        seed=seed_override if seed_override is not None else _one(raw, "seed", int, ExperimentConfig.seed),
        epsilon=_one(raw, "epsilon", float, None),
        delta=_one(raw, "delta", float, None),
        checks=checks,
        output=base_dir / _one(raw, "output", str, str(ExperimentConfig.output)),
        samples=_one(raw, "samples", int, ExperimentConfig.samples),
        antithetic=_one(raw, "antithetic", _bool, False),
        picard_iters=_one(raw, "picard_iters", int, ExperimentConfig.picard_iters),
        features=_many(raw, "features", str, ExperimentConfig.features),
        n_list=_many(raw, "n_list", int, ExperimentConfig.n_list),
        magnitudes=_many(raw, "magnitudes", float, ExperimentConfig.magnitudes),
        scales=_many(raw, "scales", float, ExperimentConfig.scales),
        ito_steps=_many(raw, "ito_steps", int, ExperimentConfig.ito_steps),
        ito_paths=_one(raw, "ito_paths", int, ExperimentConfig.ito_paths),
        strong_coarse_steps=_one(raw, "strong_coarse_steps", int, ExperimentConfig.strong_coarse_steps),
        strong_levels=_one(raw, "strong_levels", int, ExperimentConfig.strong_levels),
        strong_paths=_one(raw, "strong_paths", int, ExperimentConfig.strong_paths),
        sweeps=sweeps,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    positive = {
        "N": cfg.n_paths, "steps": cfg.steps, "samples": cfg.samples, "picard_iters": cfg.picard_iters,
        "ito_paths": cfg.ito_paths, "strong_coarse_steps": cfg.strong_coarse_steps,
        "strong_levels": cfg.strong_levels, "strong_paths": cfg.strong_paths,
    }
    for k, v in positive.items():
        if not v > 0:
            raise ConfigError(f"{k} must be positive")
    for k in ("epsilon", "delta"):
        v = getattr(cfg, k)
        if v is not None and not v > 0:
            raise ConfigError(f"{k} must be positive")
    for k in ("n_list", "magnitudes", "scales", "ito_steps"):
        if any(not x > 0 for x in getattr(cfg, k)):
            raise ConfigError(f"{k} entries must be positive")
    for a, vals in cfg.sweeps.items():
        if any(not x > 0 for x in vals):
            raise ConfigError(f"sweep_{a} entries must be positive")
    if cfg.antithetic and cfg.n_paths % 2:
        raise ConfigError("antithetic sampling needs an even N")
    try:
        RegressionBasis(cfg.features)
        RegularityProbeConfig(cfg.magnitudes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    entry = get_problem(cfg.problem)
    spec = entry.spec()
    if cfg.gamma.dim != spec.state_dim:
        raise ConfigError(f"gamma has dimension {cfg.gamma.dim}, problem {cfg.problem!r} has {spec.state_dim}")
    if not cfg.gamma.time < spec.T:
        raise ConfigError(f"gamma must stop before the horizon T={spec.T:g}")
    for c in ("pde_analytic", "ito"):
        if c in cfg.checks and not entry.has_closed_form:
            raise ConfigError(f"check {c!r} needs a closed-form value functional; {cfg.problem!r} has none")


def load_config(path: str | os.PathLike, seed_override: int | None = None) -> ExperimentConfig:
    p = FsPath(path)
    text = p.read_text()  # OSError -> exit 3
    return build_config(parse_config_text(text), p.parent, seed_override)


# --- runs ---------------------------------------------------------------------


def run_checks(cfg: ExperimentConfig) -> list[VerificationReport]:
    entry = get_problem(cfg.problem)
    spec = entry.spec()
    solver = cfg.solver()
    deriv = cfg.deriv(spec.T)
    probe = RegularityProbeConfig(cfg.magnitudes, scales=cfg.scales)
    reports: list[VerificationReport] = []
    for check in cfg.checks:
        if check == "pde":
            reports.append(ppde_residual(spec, cfg.gamma, solver, deriv))
        elif check == "pde_analytic":
            reports.append(ppde_residual(spec, cfg.gamma, solver, deriv, analytic_u=entry.u, bsde_identity_paths=min(cfg.n_paths, 2000)))
        elif check == "flow":
            reports.append(flow_property_check(spec, cfg.gamma, solver, cfg.samples))
        elif check == "zrep":
            reports.append(z_representation_check(spec, cfg.gamma, solver, DerivativeConfig(cfg.epsilon), cfg.samples))
        elif check == "regularity":
            reports.extend(regularity_probe(spec, cfg.gamma, solver, probe, moments=False))
        elif check == "moments":
            reports.extend(moment_probe(spec, cfg.gamma, solver, probe))
        elif check == "discretization":
            reports.append(discretization_convergence(spec, cfg.gamma, solver, cfg.n_list))
        elif check == "ito":
            reports.append(ito_convergence_check(entry.u, spec, cfg.gamma, cfg.ito_steps, cfg.ito_paths, cfg.seed, cfg.epsilon or 1e-4))
        elif check == "strong_order":
            reports.append(strong_order_check(spec, cfg.gamma, cfg.strong_coarse_steps, cfg.strong_levels, cfg.strong_paths, cfg.seed))
    return reports


def _u_rows(cfg: ExperimentConfig, entry: ProblemRegistryEntry) -> list[list[str]]:
    val, se, _ = UFunctional(entry.spec(), cfg.solver()).sample(cfg.gamma)
    exact = repr(float(entry.u.value(cfg.gamma))) if entry.has_closed_form else ""
    return [[cfg.problem, repr(float(cfg.gamma.time)), repr(float(val[0])), repr(float(se)), exact, str(cfg.n_paths), str(cfg.steps), str(cfg.seed)]]


def _write_csv(path: FsPath, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_meta(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    lines = {
        "command": command,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "threads": str(thread_count()),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "problem": cfg.problem,
        "seed": str(cfg.seed),
    }
    lines.update(extra or {})
    (cfg.output / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))


def run(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    entry = get_problem(cfg.problem)
    reports = run_checks(cfg)
    u_rows = _u_rows(cfg, entry)
    cfg.output.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.output / "report.csv", REPORT_COLUMNS, [r.row() for r in reports])
    _write_csv(cfg.output / "u_values.csv", ["problem", "t", "u", "stderr", "closed_form", "N", "steps", "seed"], u_rows)
    _write_meta(cfg, "run")
    for r in reports:
        print(r.line(), file=out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


# --- convergence sweeps -------------------------------------------------------

_DEFAULT_SWEEPS = {
    "steps": (5, 10, 20, 40),
    "N": (1000, 4000, 16000, 64000),
    "n_discretization": (1, 2, 4, 8, 16, 32, 64),
    "epsilon": (0.2, 0.1, 0.05, 0.025),
}


def convergence_rows(cfg: ExperimentConfig, axis: str) -> tuple[list[list[str]], float]:
    """Rows ``parameter,value,error,stderr`` plus the fitted log-log slope.

    The slope is fitted against the refinement variable of the axis: the step
    size ``T/steps`` for ``steps``, ``N`` itself for ``N`` (on the stderr
    column, the error column being pure noise there), ``n`` for
    ``n_discretization`` and ``epsilon`` for ``epsilon``.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown axis {axis!r}")
    entry = get_problem(cfg.problem)
    spec = entry.spec()
    values = cfg.sweeps.get(axis) or _DEFAULT_SWEEPS[axis]
    if axis in ("steps", "N", "epsilon") and not entry.has_closed_form:
        raise ConfigError(f"axis {axis!r} needs a closed-form reference; {cfg.problem!r} has none")
    exact = float(entry.u.value(cfg.gamma)) if entry.has_closed_form else math.nan
    rows, xs, ys = [], [], []
    if axis == "steps":
        for s in values:
            val, se, _ = UFunctional(spec, cfg.solver().replace(steps=int(s))).sample(cfg.gamma)
            err = abs(float(val[0]) - exact)
            rows.append([axis, str(int(s)), repr(err), repr(float(se))])
            xs.append(spec.T / s)
            ys.append(err)
    elif axis == "N":
        for n in values:
            val, se, _ = UFunctional(spec, cfg.solver().replace(n_paths=int(n))).sample(cfg.gamma)
            rows.append([axis, str(int(n)), repr(abs(float(val[0]) - exact)), repr(float(se))])
            xs.append(n)
            ys.append(se)
    elif axis == "n_discretization":
        rep = discretization_convergence(spec, cfg.gamma, cfg.solver(), tuple(int(n) for n in values))
        for n, l2, se in zip(rep.detail["n"], rep.detail["l2"], rep.detail["l2_stderr"]):
            rows.append([axis, str(n), repr(l2), repr(se)])
        xs, ys = list(rep.detail["n"]), list(rep.detail["l2"])
    else:
        if entry.d_x is None:
            raise ConfigError(f"axis 'epsilon' needs a closed-form D_x for {cfg.problem!r}")
        u = UFunctional(spec, cfg.solver())
        ref = np.atleast_1d(entry.d_x(cfg.gamma))
        for eps in values:
            est = np.atleast_1d(vertical_derivative(u, cfg.gamma, DerivativeConfig(float(eps))))
            _, _, up = u.sample(vertical_bump(cfg.gamma, float(eps)))
            _, _, dn = u.sample(vertical_bump(cfg.gamma, -float(eps)))
            per_path = (up[:, 0] - dn[:, 0]) / (2 * eps)
            se = float(per_path.std(ddof=1) / math.sqrt(per_path.size))
            err = float(np.max(np.abs(est - ref)))
            rows.append([axis, repr(float(eps)), repr(err), repr(se)])
            xs.append(eps)
            ys.append(err)
    ys_arr = np.asarray(ys, dtype=float)
    slope = fit_slope(xs, ys_arr) if np.all(ys_arr > 0) and len(xs) >= 2 else math.nan
    rows.append(["slope", repr(slope), "", ""])
    return rows, slope


def convergence(cfg: ExperimentConfig, axis: str, out=None) -> int:
    out = out or sys.stdout
    rows, slope = convergence_rows(cfg, axis)
    cfg.output.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.output / f"convergence_{axis}.csv", CONVERGENCE_COLUMNS, rows)
    _write_meta(cfg, f"convergence --axis {axis}")
    print(f"{cfg.problem} {axis}: fitted slope {slope:.4g}", file=out)
    return EXIT_OK


def simulate(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    from .forward import simulate_ensemble

    spec = get_problem(cfg.problem).spec()
    solver = cfg.solver()
    ens = simulate_ensemble(spec, cfg.gamma, solver.grid_for(cfg.gamma, spec.T), cfg.n_paths, cfg.seed, cfg.antithetic)
    cfg.output.mkdir(parents=True, exist_ok=True)
    ens.to_csv(cfg.output / "ensemble.csv", include_increments=True)
    _write_meta(cfg, "simulate")
    print(f"wrote {ens.size} paths x {ens.steps} steps to {cfg.output / 'ensemble.csv'}", file=out)
    return EXIT_OK


def list_problems(out=None) -> int:
    out = out or sys.stdout
    for e in registry_builtin():
        tag = "closed form" if e.has_closed_form else "Monte Carlo"
        print(f"{e.name:<12} [{tag}] {e.description}", file=out)
    return EXIT_OK


# --- entry point --------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pathfk", description="Monte Carlo verification of path-dependent PDE solutions.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run the configured checks"), ("simulate", "export the forward ensemble")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p = sub.add_parser("convergence", help="sweep one parameter and fit a log-log slope")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_parser("list-problems", help="show the built-in problems")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-problems":
        return list_problems()
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"pathfk: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, UnicodeDecodeError) as exc:
        print(f"pathfk: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # malformed gamma CSV
        print(f"pathfk: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "run":
            return run(cfg)
        if args.command == "convergence":
            return convergence(cfg, args.axis)
        return simulate(cfg)
    except ConfigError as exc:
        print(f"pathfk: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"pathfk: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
