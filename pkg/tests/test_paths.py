import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathfk.paths import (
    Path,
    PathBatch,
    SimulationGrid,
    d_infinity,
    discretize_n,
    eval_path,
    flat_extension,
    read_path_csv,
    sup_norm,
    vertical_bump,
    write_path_csv,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def paths(draw, dim=1, max_nodes=6):
    k = draw(st.integers(1, max_nodes))
    gaps = draw(st.lists(st.floats(0.01, 0.5), min_size=k - 1, max_size=k - 1))
    grid = np.concatenate([[0.0], np.cumsum(gaps)])
    values = draw(st.lists(st.lists(finite, min_size=dim, max_size=dim), min_size=k, max_size=k))
    return Path(grid, values)


# --- construction ---------------------------------------------------------------


def test_path_rejects_bad_grids():
    with pytest.raises(ValueError):
        Path([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        Path([0.0, 0.5, 0.5], [1, 2, 3])
    with pytest.raises(ValueError):
        Path([0.0, 0.5], [1.0])
    with pytest.raises(ValueError):
        Path([0.0, 0.5], [1.0, np.nan])


def test_path_is_immutable():
    p = Path([0, 0.5], [1, 2])
    with pytest.raises(AttributeError):
        p.grid = np.zeros(2)
    with pytest.raises(ValueError):
        p.values[0, 0] = 5.0


def test_simulation_grid():
    g = SimulationGrid(0.0, 1.0, 4)
    np.testing.assert_allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    assert g.dt == 0.25
    assert SimulationGrid.aligned(0.5, 1.0, 0.02).steps == 25
    assert SimulationGrid.aligned(0.5, 1.0, 0.02).step_offset == 25
    assert SimulationGrid.aligned(0.3, 1.0, 0.25).steps == 3
    assert SimulationGrid.aligned(1.0, 1.0, 0.02).steps == 0
    with pytest.raises(ValueError):
        SimulationGrid(1.0, 0.5, 3)


# --- sup norm, eval, metric ------------------------------------------------------


def test_sup_norm_examples():
    assert sup_norm(Path([0, 0.1, 0.2], [0, 0, 0])) == 0.0
    assert sup_norm(Path([0, 0.5], [1.0, -2.0])) == 2.0


@given(paths(), finite)
def test_sup_norm_of_bump_bounded(p, x):
    assert sup_norm(vertical_bump(p, x)) <= sup_norm(p) + abs(x) + 1e-12


def test_eval_examples():
    p = Path([0, 0.5], [1, 2])
    assert eval_path(p, 0.25)[0] == 1.0
    assert eval_path(p, 0.5)[0] == 2.0
    assert eval_path(p, 0.0)[0] == 1.0
    with pytest.raises(ValueError):
        eval_path(p, 0.6)
    with pytest.raises(ValueError):
        eval_path(p, -0.1)


def test_d_infinity_examples():
    a = Path([0.0], [1.0])
    assert d_infinity(a, a) == 0.0
    assert d_infinity(a, flat_extension(a, 0.5)) == pytest.approx(0.5)
    assert d_infinity(Path([0, 0.5], [1.0, 2.0]), Path([0, 0.5], [1.0, 2.5])) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        d_infinity(a, Path([0.0], [[1.0, 2.0]]))


def test_d_infinity_uses_stopped_values():
    # b keeps its last value after its own time; the gap at s in (0.2, 0.5] is |3 - 1|
    a = Path([0, 0.2, 0.5], [1, 1, 3])
    b = Path([0, 0.2], [1, 1])
    assert d_infinity(a, b) == pytest.approx(2.0 + 0.3)


@settings(max_examples=60)
@given(paths(dim=2), paths(dim=2), paths(dim=2))
def test_d_infinity_is_pseudometric(a, b, c):
    assert d_infinity(a, a) == 0.0
    assert d_infinity(a, b) == pytest.approx(d_infinity(b, a))
    assert d_infinity(a, c) <= d_infinity(a, b) + d_infinity(b, c) + 1e-9


# --- vertical bump ----------------------------------------------------------------


def test_vertical_bump_examples():
    p = Path([0, 0.5], [1, 2])
    assert vertical_bump(p, 0.0) == p
    q = vertical_bump(p, 0.3)
    np.testing.assert_allclose(q.values[:, 0], [1, 2.3])
    np.testing.assert_array_equal(p.values[:, 0], [1, 2])


@given(paths(dim=2), st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2))
def test_vertical_bump_additive(p, x, y):
    twice = vertical_bump(vertical_bump(p, x), y)
    once = vertical_bump(p, np.add(x, y))
    np.testing.assert_array_equal(twice.grid, once.grid)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-12)


@given(paths(), finite)
def test_vertical_bump_only_moves_current_value(p, x):
    q = vertical_bump(p, x)
    np.testing.assert_array_equal(q.grid, p.grid)
    for s in p.grid[:-1]:
        np.testing.assert_array_equal(eval_path(q, s), eval_path(p, s))


# --- flat extension ---------------------------------------------------------------


def test_flat_extension_examples():
    p = Path([0, 0.5], [1, 2])
    assert flat_extension(p, 0.5) is p
    q = flat_extension(p, 1.0, 0.25)
    np.testing.assert_allclose(q.grid, [0, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(q.values[:, 0], [1, 2, 2, 2])
    with pytest.raises(ValueError):
        flat_extension(p, 0.4)


def test_flat_extension_last_node_exact():
    q = flat_extension(Path([0, 0.3], [1, 2]), 1.0, 0.3)
    assert q.grid[-1] == 1.0
    assert np.all(np.diff(q.grid) > 0)


@given(paths(), st.floats(0.0, 2.0), st.floats(0.05, 1.0))
def test_flat_extension_properties(p, ds, h):
    q = flat_extension(p, p.time + ds, h)
    assert sup_norm(q) == sup_norm(p)
    for s in np.linspace(p.time, q.time, 7):
        np.testing.assert_array_equal(eval_path(q, s), p.last)


# --- n-block resampling -----------------------------------------------------------


def test_discretize_constant_path_unchanged():
    p = flat_extension(Path([0.0], [1.5]), 1.0, 0.1)
    for n in (1, 2, 4, 8):
        q = discretize_n(p, 0.0, n, 1.0)
        assert sup_norm(q) == 1.5
        assert d_infinity(p, q) == 0.0


def test_discretize_one_block_freezes_at_endpoint():
    rng = np.random.default_rng(3)
    grid = np.linspace(0, 1, 101)
    vals = np.concatenate([[0.0], np.cumsum(rng.normal(0, 0.1, 100))])
    p = Path(grid, vals)
    q = discretize_n(p, 0.0, 1, 1.0)
    for s in np.linspace(0, 1, 23):
        np.testing.assert_allclose(eval_path(q, s), vals[-1])


def test_discretize_block_values():
    # blocks [0.5, 0.75), [0.75, 1.0) carry p(0.75) and p(1.0)
    p = Path([0, 0.5, 0.6, 0.75, 0.9, 1.0], [9, 1, 2, 3, 4, 5])
    q = discretize_n(p, 0.5, 2, 1.0)
    assert eval_path(q, 0.25)[0] == 9
    assert eval_path(q, 0.5)[0] == 3
    assert eval_path(q, 0.7)[0] == 3
    assert eval_path(q, 0.8)[0] == 5
    assert eval_path(q, 1.0)[0] == 5


def test_discretize_clips_blocks_at_current_time():
    # s = 0.8 < T: the block [0.5, 1.0) is cut at s and carries p(0.8)
    p = Path([0, 0.5, 0.6, 0.8], [9, 1, 2, 3])
    q = discretize_n(p, 0.5, 1, 1.0)
    assert q.time == 0.8
    assert eval_path(q, 0.55)[0] == 3
    assert eval_path(q, 0.8)[0] == 3
    with pytest.raises(ValueError):
        discretize_n(p, 0.9, 2, 1.0)
    with pytest.raises(ValueError):
        discretize_n(p, 0.5, 0, 1.0)


@given(paths(max_nodes=8), st.integers(1, 9))
def test_discretize_keeps_past_and_endpoint(p, n):
    t = float(p.grid[len(p.grid) // 2])
    horizon = p.time + 0.5
    q = discretize_n(p, t, n, horizon)
    assert q.time == p.time
    np.testing.assert_array_equal(q.last, p.last)
    for s in p.grid[p.grid < t]:
        np.testing.assert_array_equal(eval_path(q, s), eval_path(p, s))


@pytest.mark.parametrize("fn", [lambda x: x, lambda x: x**2, lambda x: np.sqrt(x)])
def test_discretize_converges_monotonically_on_monotone_paths(fn):
    grid = np.linspace(0, 1, 1025)
    p = Path(grid, fn(grid))
    gaps = [d_infinity(discretize_n(p, 0.0, n, 1.0), p) for n in (1, 2, 4, 8, 16, 32, 64)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < gaps[0] / 4


def test_discretize_converges_on_oscillating_path():
    # once a block is shorter than the oscillation the sup gap is bounded by
    # the increment over one block (|f'| <= 6) plus one original cell
    grid = np.linspace(0, 1, 1025)
    p = Path(grid, np.sin(6 * grid))
    ns = (8, 16, 32, 64)
    gaps = [d_infinity(discretize_n(p, 0.0, n, 1.0), p) for n in ns]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    for n, gap in zip(ns, gaps):
        assert gap <= 6 / n + 6 / 1024


def test_discretize_is_pure():
    p = Path([0, 0.5, 1.0], [1, 2, 3])
    before = p.values.copy()
    a = discretize_n(p, 0.0, 3, 1.0)
    b = discretize_n(p, 0.0, 3, 1.0)
    assert a == b
    np.testing.assert_array_equal(p.values, before)


# --- batches ---------------------------------------------------------------------


def test_batch_matches_single_paths():
    prefix = Path([0, 0.2, 0.4], [1.0, -1.0, 0.5])
    times = np.array([0.4, 0.6, 0.8])
    states = np.array([[[0.5], [2.0], [3.0]], [[0.5], [-2.0], [0.0]]])
    pb = PathBatch(prefix, times, states)
    for i in range(2):
        p = pb.path(i)
        assert p.time == pytest.approx(0.8)
        integral = np.sum(np.diff(p.grid) * p.values[:-1, 0])
        assert pb.integral()[i, 0] == pytest.approx(integral)
        assert pb.running_max()[i, 0] == p.values.max()
        assert pb.running_min()[i, 0] == p.values.min()
        assert pb.sup_norm()[i] == sup_norm(p)
        assert pb.value_at(0.3)[i, 0] == -1.0
        assert pb.value_at(0.7)[i, 0] == states[i, 1, 0]
    bumped = pb.bump([0.25])
    assert bumped.path(0) == vertical_bump(pb.path(0), 0.25)
    ext = pb.extend_flat(1.0, 0.1)
    assert ext.path(1) == flat_extension(pb.path(1), 1.0, 0.1)
    disc = pb.discretize(0.4, 2, 1.0)
    assert disc.path(0) == discretize_n(pb.path(0), 0.4, 2, 1.0)


def test_batch_from_single_node_path():
    pb = PathBatch.from_path(Path([0.0], [2.0]))
    assert pb.integral().shape == (1, 1)
    assert pb.integral()[0, 0] == 0.0


# --- CSV --------------------------------------------------------------------------


def test_csv_roundtrip_scalar(tmp_path):
    p = Path([0, 0.1, 0.35], [1.0, -0.5, 1 / 3])
    f = tmp_path / "p.csv"
    write_path_csv(p, f)
    text = f.read_bytes()
    assert text.startswith(b"time,value\n")
    assert b"\r" not in text
    assert read_path_csv(f) == p


def test_csv_roundtrip_vector():
    p = Path([0, 0.5], [[1.0, 2.0], [3.0, 4.0]])
    buf = io.StringIO()
    write_path_csv(p, buf)
    assert buf.getvalue().splitlines()[0] == "time,value_1,value_2"
    assert read_path_csv(io.StringIO(buf.getvalue())) == p


def test_csv_requires_header():
    with pytest.raises(ValueError):
        read_path_csv(io.StringIO("0,1\n0.5,2\n"))


def test_flat_extension_shorter_than_grid_step():
    q = flat_extension(Path([0.0], [1.0]), 1e-11, 1.0)
    assert q.time == 1e-11
    np.testing.assert_array_equal(q.last, [1.0])
