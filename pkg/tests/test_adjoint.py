import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from problems_2d import two_dim_problem

from needlecheck.adjoint import (
    AdjointSet,
    StochasticCoefficientsError,
    duality_check,
    fundamental_solution,
    polynomial_basis,
    solve_adjoint_deterministic,
    solve_adjoint_regression,
    solve_adjoints,
)
from needlecheck.problem import ControlPolicy, PathEnsemble, TimeGrid, UsageError, simulate_state
from needlecheck.problems import build, polynomial_problem
from needlecheck.variational import epsilon_ladder, solve_variational, spike_family


def zero_policy(problem):
    return ControlPolicy(lambda t: np.zeros(1), problem.control_set)


def test_example1_adjoints_exact(ex1_adjoints):
    grid, _, adj = ex1_adjoints
    expect = {1: 0.0, 2: 1.0, 3: 0.0, 4: 0.0}
    for k, val in expect.items():
        np.testing.assert_allclose(adj[k].p_mean, val, atol=1e-10)
        np.testing.assert_allclose(adj[k].q_mean, 0.0, atol=1e-10)
        assert adj[k].deterministic


def test_example2_fourth_adjoint_closed_form():
    s = build("example2")
    g = TimeGrid(1000, 1.0)
    adj = solve_adjoints(s.problem, s.policy(g), PathEnsemble(g, 8, 0), 4)
    exact = -np.exp(6 - 6 * g.nodes)
    assert np.max(np.abs(adj[4].p_mean[:, 0] / exact - 1)) < 1e-4
    assert adj[4].p_mean[0, 0] == pytest.approx(-403.42879349, rel=1e-8)
    for k in (1, 2, 3):
        np.testing.assert_allclose(adj[k].p_mean, 0.0, atol=1e-12)


def test_backward_euler_is_first_order():
    s = build("example2")
    errs = []
    for N in (250, 500, 1000):
        g = TimeGrid(N, 1.0)
        adj = solve_adjoints(s.problem, s.policy(g), PathEnsemble(g, 8, 0), 4, scheme="euler")
        errs.append(abs(adj[4].p_mean[0, 0] / -np.exp(6) - 1))
    assert errs[0] / errs[1] == pytest.approx(2, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(2, rel=0.1)


@given(st.sampled_from(["example1", "example2"]), st.integers(1, 4), st.integers(4, 40))
def test_terminal_condition_is_exact(pid, k, N):
    s = build(pid)
    g = TimeGrid(N, 1.0)
    adj = solve_adjoints(s.problem, s.policy(g), PathEnsemble(g, 8, 0), k)
    xT = np.array([s.problem.x0])
    np.testing.assert_array_equal(adj[k].p_mean[-1], -s.problem.h(xT, k).reshape(-1))


def test_regression_terminal_condition_is_exact():
    s = build("gbm", quadratic=True)
    g = TimeGrid(20, 1.0)
    paths = simulate_state(s.problem, s.policy(g), PathEnsemble(g, 500, 0))
    adj = solve_adjoints(s.problem, s.policy(g), paths, 2)
    x = paths.states[:, -1]
    for k in (1, 2):
        p, _ = adj[k].at(g.steps, x)
        np.testing.assert_array_equal(p.reshape(len(x), -1),
                                      -s.problem.h(x, k).reshape(len(x), -1))


def test_two_dim_second_adjoint_is_symmetric():
    prob = two_dim_problem()
    g = TimeGrid(50, 1.0)
    adj = solve_adjoints(prob, zero_policy(prob), PathEnsemble(g, 8, 0), 4)
    P2 = adj[2].p_mean.reshape(-1, 2, 2)
    np.testing.assert_allclose(P2, P2.transpose(0, 2, 1), atol=1e-12)
    assert np.abs(adj[4].p_mean).max() > 1.0


def test_two_dim_regression_agrees_with_deterministic():
    """Both solvers run on a deterministic base; they differ only by O(Δt) in the scheme."""
    prob = two_dim_problem()
    diffs = []
    for N in (50, 100):
        g = TimeGrid(N, 1.0)
        base = zero_policy(prob)
        det = solve_adjoints(prob, base, PathEnsemble(g, 8, 0), 4)
        paths = simulate_state(prob, base, PathEnsemble(g, 200, 0))
        reg = solve_adjoints(prob, base, paths, 4, method="regression")
        np.testing.assert_allclose(det[2].p_mean, reg[2].p_mean, atol=1e-12)
        diffs.append(np.abs(det[4].p_mean - reg[4].p_mean).max())
    assert diffs[1] / diffs[0] == pytest.approx(0.5, rel=0.05)


def test_gbm_regression_first_adjoint():
    a = 0.2
    s = build("gbm", a=a, c=0.5)
    g = TimeGrid(50, 1.0)
    paths = simulate_state(s.problem, s.policy(g), PathEnsemble(g, 2000, 0))
    with pytest.raises(StochasticCoefficientsError):
        solve_adjoints(s.problem, s.policy(g), paths, 1, method="deterministic")
    adj = solve_adjoints(s.problem, s.policy(g), paths, 1)
    assert adj[1].method == "regression"
    np.testing.assert_allclose(adj[1].p_mean[:, 0], -np.exp(a * (1 - g.nodes)), rtol=1e-3)
    np.testing.assert_allclose(adj[1].q_mean, 0.0, atol=1e-8)


def test_gbm_quadratic_regression_mean():
    a, c = 0.2, 0.5
    s = build("gbm", a=a, c=c, quadratic=True)
    g = TimeGrid(50, 1.0)
    paths = simulate_state(s.problem, s.policy(g), PathEnsemble(g, 4000, 0))
    adj = solve_adjoints(s.problem, s.policy(g), paths, 1)
    exact = -np.exp((2 * a + c**2) * (1 - g.nodes)) * paths.states[:, :, 0].mean(axis=0)
    np.testing.assert_allclose(adj[1].p_mean[:, 0], exact, rtol=0.03)


def test_regression_example2_small():
    s = build("example2")
    g = TimeGrid(50, 1.0)
    paths = simulate_state(s.problem, s.policy(g), PathEnsemble(g, 2000, 0))
    adj = solve_adjoints(s.problem, s.policy(g), paths, 4, method="regression")
    exact = -np.exp(6 - 6 * g.nodes)
    assert np.max(np.abs(adj[4].p_mean[:, 0] / exact - 1)) < 0.05
    assert adj[4].diagnostics["rank_min"] >= 1


def test_adjoint_errors():
    s = build("example2")
    g = TimeGrid(10, 1.0)
    base = s.policy(g)
    with pytest.raises(UsageError):
        solve_adjoint_deterministic(s.problem, base, g, 3)
    with pytest.raises(UsageError):
        solve_adjoint_deterministic(s.problem, base, g, 1, scheme="rk4")
    with pytest.raises(UsageError):
        solve_adjoints(s.problem, base, PathEnsemble(g, 8, 0), 1, method="magic")
    paths = simulate_state(s.problem, base, PathEnsemble(g, 20, 0))
    with pytest.raises(UsageError):
        solve_adjoint_regression(s.problem, base, paths, 1)
    with pytest.raises(UsageError):
        solve_adjoint_regression(s.problem, base, PathEnsemble(g, 100, 0), 1)


def test_adjoint_csv_and_missing_orders(ex1_adjoints):
    grid, _, adj = ex1_adjoints
    text = adj[2].to_csv().splitlines()
    assert text[0] == "t,p2_11,q2_11"
    assert text[1] == "0.0,1.0,0.0"
    partial = AdjointSet(grid, [adj[1]])
    vals = partial.values(0, np.zeros((3, 1)))
    assert np.all(vals[3][0] == 0.0)


def test_polynomial_basis():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_allclose(polynomial_basis(x, 2), [[1, 1, 2, 1, 2, 4]])


# ---------------------------------------------------------------------------
# fundamental solution
# ---------------------------------------------------------------------------


def test_phi_identity_without_linearisation(ex1):
    g = TimeGrid(20, 1.0)
    base = ex1.policy(g)
    fs = fundamental_solution(ex1.problem, base, simulate_state(ex1.problem, base,
                                                                 PathEnsemble(g, 10, 0)))
    np.testing.assert_array_equal(fs.phi, np.broadcast_to(np.eye(1), fs.phi.shape))


def test_phi_constant_rate():
    s = build("gbm", a=0.7, c=0.0)
    g = TimeGrid(2000, 1.0)
    base = s.policy(g)
    fs = fundamental_solution(s.problem, base, simulate_state(s.problem, base,
                                                                PathEnsemble(g, 2, 0)))
    np.testing.assert_allclose(fs.phi[0, :, 0, 0], np.exp(0.7 * g.nodes), rtol=3e-4)


def test_phi_multiplicative_noise_second_moment():
    prob = polynomial_problem(drift=[[0.0]], diffusion=[[0.0], [1.0]], x0=1.0)
    g = TimeGrid(200, 1.0)
    base = zero_policy(prob)
    fs = fundamental_solution(prob, base, simulate_state(prob, base, PathEnsemble(g, 40000, 0)))
    m2 = (fs.phi[:, -1, 0, 0] ** 2).mean()
    assert m2 == pytest.approx(np.e, rel=0.05)


def _phi_reconstruction_error(problem, N):
    g = TimeGrid(N, 1.0)
    base = build("example2").policy(g)
    paths = simulate_state(problem, base, PathEnsemble(g, 400, 0))
    sp = spike_family(0.25, [1 / 16], -1.0)[0]
    sol = solve_variational(problem, base, sp, paths)
    fs = fundamental_solution(problem, base, paths)
    i0, k = sp.cells(g)
    dW = paths.dW
    ds, sx = 2.0, 1.0
    acc = np.zeros(400)
    for i in range(i0, i0 + k):
        inv = fs.phi_inv[:, i, 0, 0]
        acc += inv * ds * dW[:, i] - inv * sx * ds * g.dt
    recon = fs.phi[:, -1, 0, 0] * acc
    y1 = sol.ys[0][:, -1, 0]
    return np.sqrt(np.mean((recon - y1) ** 2) / np.mean(y1**2))


def test_phi_reconstructs_first_variation(ex2):
    """y1(T) = Φ(T)[∫Φ⁻¹δσχ dW - ∫Φ⁻¹σ_xδσχ ds]; the two Euler schemes agree at strong order ½."""
    coarse = _phi_reconstruction_error(ex2.problem, 128)
    fine = _phi_reconstruction_error(ex2.problem, 512)
    assert coarse < 0.2
    assert fine / coarse < 0.65


# ---------------------------------------------------------------------------
# duality
# ---------------------------------------------------------------------------


def test_duality_empty_spike_is_zero(ex1_adjoints, ex1):
    grid, base, adj = ex1_adjoints
    rep = duality_check(ex1.problem, base, spike_family(0.25, [1 / 16, 1 / 32], 0.0),
                        PathEnsemble(grid, 50, 0), adj)
    assert np.all(rep.lhs == 0) and np.all(rep.rhs == 0) and np.all(rep.residual == 0)
    assert all(t["pass"] for t in rep.trend.values())


def test_duality_example1_small(ex1):
    g = TimeGrid(128, 1.0)
    base = ex1.policy(g)
    adj = solve_adjoints(ex1.problem, base, PathEnsemble(g, 8, 0), 4)
    rep = duality_check(ex1.problem, base, spike_family(0.25, epsilon_ladder(1.0, (4, 5, 6)), 1.0),
                        PathEnsemble(g, 300, 0), adj)
    assert all(t["pass"] for t in rep.trend.values())
    assert np.all(rep.lhs[1] < 0)
    assert len(rep.rows()) == 12


def test_duality_detects_a_wrong_adjoint(ex1):
    g = TimeGrid(128, 1.0)
    base = ex1.policy(g)
    adj = solve_adjoints(ex1.problem, base, PathEnsemble(g, 8, 0), 4)
    adj[2].p_mean[:] *= 1.1
    rep = duality_check(ex1.problem, base, spike_family(0.25, epsilon_ladder(1.0, (4, 5, 6, 7)), 1.0),
                        PathEnsemble(g, 1000, 5), adj, richardson=False)
    assert not rep.trend[2]["pass"]
