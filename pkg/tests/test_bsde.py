import io

import numpy as np
import pytest

from pathfk.bsde import (
    RegressionBasis,
    SingularRegressionError,
    SolverConfig,
    UFunctional,
    difference_quotient_y,
    evaluate_u,
    solve_bsde,
)
from pathfk.forward import ProblemSpec, simulate_ensemble
from pathfk.functionals import PathFunctional, constant, last_value, running_integral
from pathfk.paths import Path, SimulationGrid, flat_extension

T = 1.0
R = 0.1


def brownian(g=None, h=None, sigma=1.0):
    kw = {"h": h} if h is not None else {}
    return ProblemSpec(constant(0.0, (1,)), constant(sigma, (1, 1)), g or last_value(), T, **kw)


def discount(t, x, y, z):
    return R * y


GRID = SimulationGrid(0.0, T, 50)


@pytest.fixture(scope="module")
def terminal_solution():
    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), GRID, 100_000, 17)
    return solve_bsde(brownian(), ens)


def test_martingale_value_and_path(terminal_solution):
    sol = terminal_solution
    assert abs(sol.u_value[0] - 1.0) <= 3 * sol.u_stderr
    dev = sol.Y[:, :, 0] - sol.ensemble.states[:, :, 0]
    assert np.sqrt(np.mean(dev**2)) < 5e-2


def test_terminal_condition_exact(terminal_solution):
    sol = terminal_solution
    assert np.max(np.abs(sol.Y[:, -1, 0] - sol.ensemble.states[:, -1, 0])) == 0.0


def test_value_is_constant_at_start(terminal_solution):
    sol = terminal_solution
    assert np.all(sol.Y[:, 0, 0] == sol.u_value[0])
    # the error bar comes from the per-path values, whose mean is the estimate
    assert sol.pathwise.mean() == pytest.approx(sol.u_value[0], abs=1e-12)
    assert sol.u_stderr == pytest.approx(sol.pathwise.std(ddof=1) / np.sqrt(sol.pathwise.shape[0]))


def test_z_matches_unit_volatility(terminal_solution):
    assert np.mean(terminal_solution.Z[:, :, 0, 0]) == pytest.approx(1.0, abs=0.02)


def test_discounted_value():
    value, se = evaluate_u(brownian(h=discount), Path([0.0], [1.0]), GRID, 100_000, 3)
    assert abs(value - np.exp(-R)) <= 3 * se + 0.02


def test_integral_value():
    gamma = Path([0, 0.2, 0.5], [1.0, -1.0, 0.5])
    grid = SimulationGrid.aligned(0.5, T, 0.02)
    value, se = evaluate_u(brownian(g=running_integral()), gamma, grid, 50_000, 4)
    exact = 0.2 * 1.0 + 0.3 * -1.0 + 0.5 * 0.5
    assert abs(value - exact) <= 3 * se + 1e-3


def test_degenerate_dynamics_gives_terminal_of_flat_extension():
    spec = brownian(g=running_integral(), sigma=0.0)
    gamma = Path([0, 0.4], [2.0, 1.0])
    value, se = evaluate_u(spec, gamma, SimulationGrid.aligned(0.4, T, 0.1), 100, 0)
    assert value == pytest.approx(running_integral().value(flat_extension(gamma, T)))
    assert se < 1e-15  # spread of identical values, rounding only


def test_evaluate_twice_bit_identical():
    gamma = Path([0.0], [1.0])
    a = evaluate_u(brownian(h=discount), gamma, SimulationGrid(0.0, T, 10), 2000, 9)
    b = evaluate_u(brownian(h=discount), gamma, SimulationGrid(0.0, T, 10), 2000, 9)
    assert a == b


def test_evaluate_at_horizon_returns_terminal_value():
    gamma = Path([0, 0.5, 1.0], [0.0, 2.0, 3.0])
    value, se = evaluate_u(brownian(g=running_integral()), gamma, SimulationGrid(1.0, 1.0, 0), 10, 0)
    assert value == running_integral().value(gamma)
    assert se == 0.0


def test_comparison_sanity():
    g = PathFunctional(lambda pb: pb.last()[:, 0] ** 2, (1,))
    value, se = evaluate_u(brownian(g=g), Path([0.0], [0.0]), SimulationGrid(0.0, T, 20), 20_000, 1)
    assert value >= -3 * se


def test_picard_contracts():
    def stiff(t, x, y, z):
        return 20.0 * y + np.sin(y)  # Lipschitz constant 21, dt = 0.02 -> L dt = 0.42

    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), GRID, 4000, 5)
    sol = solve_bsde(brownian(h=stiff), ens, picard_iters=60)
    assert np.max(sol.diagnostics["picard_update"]) < 1e-10
    early = solve_bsde(brownian(h=stiff), ens, picard_iters=60, picard_tol=1e-6)
    assert np.max(early.diagnostics["picard_update"]) <= 1e-6


def test_singular_regression_names_step():
    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), SimulationGrid(0.0, T, 5), 1000, 0)
    with pytest.raises(SingularRegressionError) as info:
        solve_bsde(brownian(), ens, max_condition=1.5)
    assert info.value.step == 4
    assert "step 4" in str(info.value)


def test_condition_numbers_reported():
    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), SimulationGrid(0.0, T, 5), 1000, 0)
    sol = solve_bsde(brownian(), ens)
    cond = sol.diagnostics["condition"]
    assert cond.shape == (5,)
    assert cond[0] == 1.0
    assert np.all(cond[1:] > 1.0)


def test_basis_guard_and_validation():
    basis = RegressionBasis()
    assert basis.size(1) == 5
    with pytest.raises(ValueError):
        basis.check(99, 1)
    basis.check(100, 1)
    with pytest.raises(ValueError):
        RegressionBasis(("constant", "cubic"))
    with pytest.raises(ValueError):
        RegressionBasis(())
    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), SimulationGrid(0.0, T, 3), 60, 0)
    with pytest.raises(ValueError):
        solve_bsde(brownian(), ens)


def test_optional_features():
    basis = RegressionBasis(("constant", "value", "running_min", "anchor"))
    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), SimulationGrid(0.0, T, 5), 2000, 0)
    sol = solve_bsde(brownian(), ens, basis, max_condition=np.inf)
    assert abs(sol.u_value[0] - 1.0) < 4 * sol.u_stderr


def test_non_finite_driver_raises():
    def bad(t, x, y, z):
        return np.full_like(y, np.nan)

    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), SimulationGrid(0.0, T, 3), 200, 0)
    with pytest.raises(FloatingPointError):
        solve_bsde(brownian(h=bad), ens)


def test_antithetic_stderr_uses_pair_means():
    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), SimulationGrid(0.0, T, 5), 2000, 0, antithetic=True)
    sol = solve_bsde(brownian(), ens)
    # X_T of a pair averages to the start value exactly
    assert sol.u_stderr < 1e-12
    assert sol.u_value[0] == pytest.approx(1.0, abs=1e-12)


def test_solution_csv():
    ens = simulate_ensemble(brownian(), Path([0.0], [1.0]), SimulationGrid(0.0, T, 2), 200, 0)
    sol = solve_bsde(brownian(), ens)
    buf = io.StringIO()
    sol.to_csv(buf)
    lines = buf.getvalue().split("\n")
    assert lines[0] == "path_id,step,time,Y,Z"
    assert lines[3].startswith("0,2,1.0,") and lines[3].endswith(",")


# --- difference quotients ---------------------------------------------------------


def test_difference_quotient_linear_problem():
    dq = difference_quotient_y(brownian(), Path([0.0], [1.0]), 0, 1e-2, SimulationGrid(0.0, T, 20), 20_000, 2)
    assert np.max(np.abs(dq.y_mean()[:, 0] - 1.0)) < 1e-2
    assert dq.z.shape == (20_000, 20, 1, 1)


def test_difference_quotient_stable_in_step():
    spec = brownian(h=discount)
    grid = SimulationGrid(0.0, T, 20)
    prev = None
    for h in (1e-2, 5e-3, 2.5e-3, 1e-3):
        q = difference_quotient_y(spec, Path([0.0], [1.0]), 0, h, grid, 10_000, 2).y_mean()[0, 0]
        if prev is not None:
            assert q / prev == pytest.approx(1.0, rel=0.1)
        prev = q


def test_difference_quotient_zero_for_constant_terminal():
    dq = difference_quotient_y(brownian(g=constant(2.0)), Path([0.0], [1.0]), 0, 1e-2, SimulationGrid(0.0, T, 10), 2000, 2)
    # regression rounding divided by the bump size
    assert np.max(np.abs(dq.y)) < 1e-8
    assert np.max(np.abs(dq.z)) < 1e-8


def test_difference_quotient_validation():
    with pytest.raises(ValueError):
        difference_quotient_y(brownian(), Path([0.0], [1.0]), 0, 0.0, GRID, 100, 0)
    with pytest.raises(ValueError):
        difference_quotient_y(brownian(), Path([0.0], [1.0]), 1, 0.1, GRID, 100, 0)


# --- the value functional -------------------------------------------------------------


def test_u_functional_caches_and_shares_noise():
    u = UFunctional(brownian(), SolverConfig(n_paths=2000, steps=10, seed=4))
    gamma = Path([0.0], [1.0])
    first = u.sample(gamma)
    assert u.sample(gamma) is first
    # a bump shifts every trajectory by the same amount under common noise
    bumped = u.value(Path([0.0], [1.5]))
    assert bumped - u.value(gamma) == pytest.approx(0.5, abs=1e-10)


def test_u_functional_on_stopped_paths_uses_global_grid():
    cfg = SolverConfig(n_paths=1000, steps=10, seed=4)
    assert cfg.grid_for(Path([0, 0.3], [0, 0]), T).steps == 7
    assert cfg.grid_for(Path([0, 0.35], [0, 0]), T).steps == 7
    assert SolverConfig().replace(steps=20).steps == 20
    with pytest.raises(ValueError):
        SolverConfig(n_paths=0)
