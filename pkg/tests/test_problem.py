import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from needlecheck.problem import (
    ControlPolicy,
    ControlSet,
    PathEnsemble,
    SimulationDivergedError,
    Spike,
    SpikeAlignmentError,
    TimeGrid,
    UsageError,
    check_problem,
    cost_difference_crn,
    estimate_cost,
    evaluate_cost,
    simulate_state,
)
from needlecheck.problems import build, describe, polynomial_problem


def test_grid_basics():
    g = TimeGrid(8, 2.0)
    assert g.dt == 0.25
    assert g.index(0.75) == 3
    np.testing.assert_allclose(g.nodes, np.arange(9) * 0.25)
    with pytest.raises(SpikeAlignmentError):
        g.index(0.1)
    with pytest.raises(UsageError):
        TimeGrid(0, 1.0)


@given(st.integers(1, 6), st.integers(0, 60), st.integers(1, 4))
def test_spike_cells_are_local(level, start, width):
    g = TimeGrid(64, 1.0)
    tau, eps = start * g.dt, width * g.dt
    sp = Spike(tau, eps, 1.0)
    if start + width > 64:
        with pytest.raises(SpikeAlignmentError):
            sp.cells(g)
        return
    assert sp.cells(g) == (start, width)
    pol = build("example1").policy(g).with_spike(sp)
    vals = pol.values(g)[:, 0]
    inside = np.zeros(64, bool)
    inside[start:start + width] = True
    assert np.all(vals[inside] == 1.0) and np.all(vals[~inside] == 0.0)


def test_spike_misaligned():
    with pytest.raises(SpikeAlignmentError):
        Spike(0.25, 0.01, 1.0).cells(TimeGrid(8, 1.0))
    with pytest.raises(UsageError):
        Spike(-0.1, 0.1, 1.0)


def test_policy_outside_control_set():
    g = TimeGrid(4, 1.0)
    pol = build("example1").policy(g).with_spike(Spike(0.25, 0.25, 2.0))
    with pytest.raises(UsageError):
        pol.validate(g)


def test_control_set():
    cs = ControlSet.finite([-1, 0, 1])
    assert cs.contains([0.0]) and not cs.contains([0.5])
    assert len(cs.probe) == 3


def test_block_regeneration_is_bit_identical():
    g = TimeGrid(16, 1.0)
    a = PathEnsemble(g, 20, seed=3, block_size=8)
    b = PathEnsemble(g, 20, seed=3, block_size=8)
    np.testing.assert_array_equal(a.block(1), b.block(1))
    np.testing.assert_array_equal(a.dW[8:16], b.block(1))
    assert a.digest() == b.digest()
    assert a.digest() != PathEnsemble(g, 20, seed=4, block_size=8).digest()
    with pytest.raises(UsageError):
        PathEnsemble(g, 0)


def test_simulation_deterministic_under_seed(ex1):
    g = TimeGrid(32, 1.0)
    pol = ex1.policy(g).with_spike(Spike(0.25, 0.125, 1.0))
    a = simulate_state(ex1.problem, pol, PathEnsemble(g, 50, seed=1))
    b = simulate_state(ex1.problem, pol, PathEnsemble(g, 50, seed=1))
    np.testing.assert_array_equal(a.states, b.states)


def test_example_costs_vanish_at_base(ex1, ex2):
    g = TimeGrid(100, 1.0)
    for s in (ex1, ex2):
        J, se, aborted = estimate_cost(s.problem, s.policy(g), PathEnsemble(g, 200, 0))
        assert J == 0.0 and se == 0.0 and aborted == 0


def test_gbm_mean_matches_euler_closed_form():
    s = build("gbm", a=0.3, c=0.4, x0=1.0)
    g = TimeGrid(50, 1.0)
    paths = simulate_state(s.problem, s.policy(g), PathEnsemble(g, 20000, 0))
    J, se = evaluate_cost(s.problem, s.policy(g), paths)
    expect = (1 + 0.3 * g.dt) ** 50
    assert abs(J - expect) < 4 * se


def test_crn_difference_of_identical_policies_is_zero(ex1):
    g = TimeGrid(32, 1.0)
    pol = ex1.policy(g)
    d, se = cost_difference_crn(ex1.problem, pol, pol, PathEnsemble(g, 100, 0))
    assert d == 0.0 and se == 0.0


def test_crn_reduces_variance(ex1):
    g = TimeGrid(64, 1.0)
    base = ex1.policy(g)
    pert = base.with_spike(Spike(0.25, 1 / 16, 1.0))
    paths = PathEnsemble(g, 4000, 0)
    d, se = cost_difference_crn(ex1.problem, base, pert, paths)
    J1, se1, _ = estimate_cost(ex1.problem, pert, paths)
    assert np.isclose(d, J1 - 0.0) and se <= se1 + 1e-15


def test_divergent_paths_are_flagged():
    prob = polynomial_problem(drift=[[0.0], [0.0], [0.0], [5.0]], diffusion=[[1.0]], x0=1.0)
    g = TimeGrid(50, 1.0)
    pol = ControlPolicy(lambda t: np.zeros(1), prob.control_set)
    paths = simulate_state(prob, pol, PathEnsemble(g, 20, 0))
    assert paths.aborted.any()
    assert np.all(np.isfinite(paths.states))
    err = SimulationDivergedError(3, 7)
    assert "3" in str(err)


def test_check_problem(ex1, ex2):
    q = check_problem(ex2.problem)
    assert q["drift"] == pytest.approx(0.0, abs=1e-9)
    assert q["diffusion"] == pytest.approx(1.0)
    check_problem(ex1.problem)
    bad = polynomial_problem(drift=[[0.0], [1e6]], diffusion=[[1.0]])
    with pytest.raises(UsageError):
        check_problem(bad)


def test_registry():
    ids = [k for k, _ in describe()]
    assert {"example1", "example2", "lq", "gbm", "polynomial"} <= set(ids)
    with pytest.raises(UsageError):
        build("nope")
    with pytest.raises(UsageError):
        build("example2", bogus=1)


def test_lq_optimal_control_beats_needles():
    s = build("lq", s=0.0)
    g = TimeGrid(32, 1.0)
    base = s.policy(g)
    paths = PathEnsemble(g, 1, 0)
    for v in (-2.0, 0.0, 1.0):
        pert = base.with_spike(Spike(0.5, 1 / 8, v))
        d, _ = cost_difference_crn(s.problem, base, pert, paths)
        assert d > 0
