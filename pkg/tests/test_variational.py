import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from needlecheck.problem import PathEnsemble, Spike, TimeGrid, UsageError
from needlecheck.problems import build
from needlecheck.variational import (
    _martingale_increment,
    epsilon_ladder,
    fit_orders,
    ladder_trend,
    refine_increments,
    refined_policy,
    solve_variational,
    spike_family,
    taylor_check,
)


@given(st.integers(0, 40), st.integers(1, 8), st.sampled_from([-1.0, 1.0]))
def test_variations_vanish_before_the_spike(start, width, v):
    s = build("example2")
    g = TimeGrid(64, 1.0)
    sp = Spike(start * g.dt, width * g.dt, v)
    sol = solve_variational(s.problem, s.policy(g), sp, PathEnsemble(g, 6, 1))
    for y in sol.ys:
        assert np.all(y[:, : start + 1] == 0.0)
    assert np.all(sol.dx[:, : start + 1] == 0.0)


def test_empty_spike_gives_zero_variations(ex1):
    g = TimeGrid(32, 1.0)
    base = ex1.policy(g)
    for sp in (Spike(0.25, 0.0, 1.0), Spike(0.25, 0.125, 0.0)):
        sol = solve_variational(ex1.problem, base, sp, PathEnsemble(g, 10, 0))
        assert all(np.all(y == 0.0) for y in sol.ys)
        assert np.all(sol.dx == 0.0)


def test_example1_first_variations_closed_form(ex1):
    """x̄ ≡ 0: y1(T) = v (W(τ+ε) - W(τ)) and the drift spike enters y2(T) = b(0) v ε."""
    g = TimeGrid(64, 1.0)
    paths = PathEnsemble(g, 50, 2)
    v, tau, eps = 1.0, 0.25, 0.125
    sol = solve_variational(ex1.problem, ex1.policy(g), Spike(tau, eps, v), paths)
    i, k = g.index(tau), g.index(eps)
    dW = paths.dW[:, i:i + k].sum(axis=1)
    np.testing.assert_allclose(sol.ys[0][:, -1, 0], v * dW, atol=1e-12)
    np.testing.assert_allclose(sol.ys[1][:, -1, 0], 0.5 * v * eps, atol=1e-12)


def test_linear_problem_expansion_stops_at_second_term():
    """Additive noise and linear drift: y1 = 0 and δx = y2 exactly."""
    s = build("lq", s=0.3)
    g = TimeGrid(64, 1.0)
    sol = solve_variational(s.problem, s.policy(g), Spike(0.5, 0.125, 2.0),
                            PathEnsemble(g, 20, 0), track_r1=True)
    assert np.all(sol.ys[0] == 0.0)
    assert np.abs(sol.ys[1]).max() > 0.1
    np.testing.assert_allclose(sol.residual(2), 0.0, atol=1e-12)
    for y in sol.ys[2:]:
        np.testing.assert_allclose(y, 0.0, atol=1e-14)
    np.testing.assert_allclose(sol.r1_sde, sol.residual(1), atol=1e-12)


def test_r1_sde_matches_residual(ex2):
    g = TimeGrid(64, 1.0)
    sol = solve_variational(ex2.problem, ex2.policy(g), Spike(0.25, 0.0625, -1.0),
                            PathEnsemble(g, 20, 0), track_r1=True)
    np.testing.assert_allclose(sol.r1_sde, sol.residual(1), atol=1e-10)


def test_partial_sums(ex2):
    g = TimeGrid(32, 1.0)
    sol = solve_variational(ex2.problem, ex2.policy(g), Spike(0.25, 0.125, 0.0),
                            PathEnsemble(g, 5, 0))
    np.testing.assert_allclose(sol.gamma, sol.ys[0] + sol.ys[1])
    np.testing.assert_allclose(sol.xi, sum(sol.ys))
    with pytest.raises(UsageError):
        sol.residual(5)


def test_residual_shrinks_with_order(ex2):
    g = TimeGrid(256, 1.0)
    sol = solve_variational(ex2.problem, ex2.policy(g), Spike(0.25, 1 / 32, -1.0),
                            PathEnsemble(g, 400, 0))
    r = [np.mean(np.abs(sol.residual(k)[:, -1])) for k in (1, 2)]
    assert r[1] < 0.2 * r[0]


def test_ladder():
    eps = epsilon_ladder(1.0)
    assert eps[0] == 1 / 16 and eps[-1] == 1 / 512
    assert all(b < a for a, b in zip(eps, eps[1:]))
    assert len(spike_family(0.25, eps, 1.0)) == 6


def test_ladder_trend_rules():
    assert ladder_trend([4, 2, 1, 0.5], [0.1] * 4)["pass"]
    assert ladder_trend([1e-3, 2e-3, 1e-3], [1e-2] * 3)["pass"]
    bad = ladder_trend([1, 2, 4, 8], [0.1] * 4)
    assert not bad["pass"] and not bad["monotone_within_band"]
    stuck = ladder_trend([1.0, 1.0, 1.0], [0.01] * 3)
    assert not stuck["pass"]


@given(st.integers(1, 4), st.integers(0, 1000))
def test_martingale_increment_has_zero_conditional_mean(d, seed):
    """Exact Gauss-Hermite expectation over ΔW of the control variate increment."""
    rng = np.random.default_rng(seed)
    n, dt = 2, 0.01
    P = rng.standard_normal((1, 1) + (n,) * d)
    mean = rng.standard_normal((1, 1, n))
    vol = rng.standard_normal((1, 1, n))
    z, w = np.polynomial.hermite_e.hermegauss(8)
    w = w / w.sum()
    dw = np.sqrt(dt) * z
    vals = _martingale_increment(P, d, mean, vol, dw[None, :], dt)
    assert abs(np.sum(w * vals[0])) < 1e-12 * (1 + np.abs(vals).max())


def test_martingale_increment_matches_definition():
    rng = np.random.default_rng(0)
    n, d, dt = 2, 2, 0.04
    P = rng.standard_normal((1, 1, n, n))
    mean, vol = rng.standard_normal((2, 1, 1, n))
    z, w = np.polynomial.hermite_e.hermegauss(6)
    w = w / w.sum()
    x1 = lambda dw: mean[0, 0] + vol[0, 0] * dw
    cond = sum(wk * x1(np.sqrt(dt) * zk) @ P[0, 0] @ x1(np.sqrt(dt) * zk) for zk, wk in zip(z, w))
    dw = 0.3
    got = _martingale_increment(P, d, mean, vol, np.array([[dw]]), dt)[0, 0]
    assert np.isclose(got, x1(dw) @ P[0, 0] @ x1(dw) - cond)


def test_refined_increments_and_policy():
    g = TimeGrid(8, 1.0)
    dW = np.random.default_rng(0).standard_normal((3000, 8)) * np.sqrt(g.dt)
    fine = refine_increments(dW, g.dt, np.random.default_rng(1))
    np.testing.assert_allclose(fine[:, 0::2] + fine[:, 1::2], dW, atol=1e-15)
    assert abs(fine.var() / (g.dt / 2) - 1) < 0.05
    s = build("lq")
    base = s.policy(g)
    fine_pol = refined_policy(base, g)
    fg = TimeGrid(16, 1.0)
    for i in range(16):
        np.testing.assert_array_equal(fine_pol.base_value(i, fg), base.base_value(i // 2, g))


def test_fit_orders_example2_small():
    s = build("example2")
    g = TimeGrid(512, 1.0)
    spikes = spike_family(0.25, epsilon_ladder(1.0, (4, 5, 6, 7)), -1.0)
    rep = fit_orders(s.problem, s.policy(g), spikes, 2.0, PathEnsemble(g, 1000, 0))
    assert rep.verdicts["y1"] == "pass" and rep.verdicts["y2"] == "pass"
    assert rep.verdicts["y3"] == "identically zero"
    assert "quantity,eps" in rep.to_csv()
    with pytest.raises(UsageError):
        fit_orders(s.problem, s.policy(g), spikes[:3], 2.0, PathEnsemble(g, 10, 0))
    with pytest.raises(UsageError):
        fit_orders(s.problem, s.policy(g), spikes[::-1], 2.0, PathEnsemble(g, 10, 0))


def test_taylor_zero_for_base_value(ex1_adjoints, ex1):
    grid, base, adj = ex1_adjoints
    spikes = spike_family(0.25, [1 / 16, 1 / 32], 0.0)
    rep = taylor_check(ex1.problem, base, spikes, PathEnsemble(grid, 100, 0), adj)
    assert rep.remainder == [0.0, 0.0] and rep.trend["pass"]


def test_taylor_example1_trend(ex1):
    from needlecheck.adjoint import solve_adjoints

    g = TimeGrid(256, 1.0)
    base = ex1.policy(g)
    adj = solve_adjoints(ex1.problem, base, PathEnsemble(g, 8, 0), 4)
    spikes = spike_family(0.25, epsilon_ladder(1.0, (4, 5, 6, 7)), 1.0)
    rep = taylor_check(ex1.problem, base, spikes, PathEnsemble(g, 400, 0), adj)
    assert rep.control_variate and rep.richardson
    assert rep.trend["pass"]
    assert len(rep.rows()) == 4
