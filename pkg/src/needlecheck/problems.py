"""Built-in problem registry and the scalar polynomial family used by config files."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import factorial
from typing import Callable, Optional

import numpy as np

from .problem import ControlPolicy, ControlProblem, ControlSet, TimeGrid, UsageError

__all__ = ["Setup", "REGISTRY", "build", "describe", "polynomial_problem"]

ORDER = 4


@dataclass(frozen=True)
class Setup:
    """A problem together with its reference base control."""

    problem: ControlProblem
    base: Callable[[TimeGrid], ControlPolicy]
    description: str
    params: dict = field(default_factory=dict)

    def policy(self, grid: TimeGrid) -> ControlPolicy:
        return self.base(grid)


def _constant_policy(value, cset: ControlSet):
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return lambda grid: ControlPolicy(base=lambda t: v, control_set=cset)


# ---------------------------------------------------------------------------
# scalar polynomials  Σ c[i][j] (x - center)^i u^j
# ---------------------------------------------------------------------------


def _poly_terms(coef):
    c = np.atleast_2d(np.asarray(coef, dtype=float))
    return [(i, j, c[i, j]) for i in range(c.shape[0]) for j in range(c.shape[1]) if c[i, j] != 0.0]


def _falling(i: int, k: int) -> float:
    return factorial(i) / factorial(i - k) if k <= i else 0.0


def _poly_eval(terms, center, kx: int, ku: int):
    def fn(t, x, u):
        z = x[..., 0] - center
        w = u[..., 0]
        out = np.zeros(np.broadcast_shapes(z.shape, w.shape))
        for i, j, c in terms:
            if i < kx or j < ku:
                continue
            out = out + c * _falling(i, kx) * _falling(j, ku) * z ** (i - kx) * w ** (j - ku)
        return out

    return fn


def _vector(fn, k):
    def g(t, x, u):
        out = fn(t, x, u)
        return out.reshape(out.shape + (1,) * (k + 1))

    return g


def _scalar(fn, k):
    def g(t, x, u):
        out = fn(t, x, u)
        return out.reshape(out.shape + (1,) * k)

    return g


def polynomial_problem(
    drift,
    diffusion,
    running_cost=((0.0,),),
    terminal_cost=(0.0,),
    terminal_center: float = 0.0,
    center: float = 0.0,
    x0: float = 0.0,
    horizon: float = 1.0,
    controls=(-1.0, 0.0, 1.0),
    name: str = "polynomial",
) -> ControlProblem:
    """Scalar problem with b, σ, f polynomial in (x - center, u) and h polynomial in x - terminal_center.

    ``drift[i][j]`` multiplies ``(x - center)^i u^j``; ``terminal_cost[i]``
    multiplies ``(x - terminal_center)^i``.
    """
    tb, ts, tf = _poly_terms(drift), _poly_terms(diffusion), _poly_terms(running_cost)
    th = [(i, 0, c) for i, c in enumerate(np.atleast_1d(np.asarray(terminal_cost, dtype=float))) if c]
    b = tuple(_vector(_poly_eval(tb, center, k, 0), k) for k in range(ORDER + 1))
    s = tuple(_vector(_poly_eval(ts, center, k, 0), k) for k in range(ORDER + 1))
    f = tuple(_scalar(_poly_eval(tf, center, k, 0), k) for k in range(ORDER + 1))

    def _h(k):
        ev = _poly_eval(th, terminal_center, k, 0)
        return lambda x: _scalar(ev, k)(0.0, x, np.zeros(x.shape[:-1] + (1,)))

    h = tuple(_h(k) for k in range(ORDER + 1))
    cd = {
        "b_u": lambda t, x, u: _poly_eval(tb, center, 0, 1)(t, x, u)[..., None, None],
        "b_uu": lambda t, x, u: _poly_eval(tb, center, 0, 2)(t, x, u)[..., None, None, None],
        "sigma_u": lambda t, x, u: _poly_eval(ts, center, 0, 1)(t, x, u)[..., None, None],
        "sigma_uu": lambda t, x, u: _poly_eval(ts, center, 0, 2)(t, x, u)[..., None, None, None],
        "f_u": lambda t, x, u: _poly_eval(tf, center, 0, 1)(t, x, u)[..., None],
        "f_uu": lambda t, x, u: _poly_eval(tf, center, 0, 2)(t, x, u)[..., None, None],
    }
    return ControlProblem(
        state_dim=1, control_dim=1, horizon=float(horizon), x0=np.array([x0], dtype=float),
        drift=b, diffusion=s, running_cost=f, terminal_cost=h,
        control_set=ControlSet.finite(controls), name=name, control_derivatives=cd,
    )


# ---------------------------------------------------------------------------
# registry entries
# ---------------------------------------------------------------------------


def example1(b0: float = 0.5, b1: float = 1.0) -> Setup:
    """dx = b(x) u dt + u dW with b(x) = b0 + b1 sin x, f = u²/2, h = -x²/2, ū ≡ 0."""
    cycle = (np.sin, np.cos, lambda z: -np.sin(z), lambda z: -np.cos(z))

    def bfun(k):
        if k == 0:
            return lambda z: b0 + b1 * np.sin(z)
        return lambda z: b1 * cycle[k % 4](z)

    def drift(k):
        g = bfun(k)
        return lambda t, x, u: (g(x[..., 0]) * u[..., 0]).reshape(x.shape[:-1] + (1,) * (k + 1))

    def diffusion(k):
        if k == 0:
            return lambda t, x, u: u[..., :1]
        return lambda t, x, u: np.zeros(x.shape[:-1] + (1,) * (k + 1))

    def running(k):
        if k == 0:
            return lambda t, x, u: 0.5 * u[..., 0] ** 2
        return lambda t, x, u: np.zeros(x.shape[:-1] + (1,) * k)

    hk = (lambda x: -0.5 * x[..., 0] ** 2, lambda x: -x, lambda x: -np.ones(x.shape + (1,)),
          lambda x: np.zeros(x.shape + (1, 1)), lambda x: np.zeros(x.shape + (1, 1, 1)))
    cd = {
        "b_u": lambda t, x, u: bfun(0)(x[..., 0])[..., None, None],
        "b_uu": lambda t, x, u: np.zeros(x.shape[:-1] + (1, 1, 1)),
        "sigma_u": lambda t, x, u: np.ones(x.shape[:-1] + (1, 1)),
        "sigma_uu": lambda t, x, u: np.zeros(x.shape[:-1] + (1, 1, 1)),
        "f_u": lambda t, x, u: u[..., :1],
        "f_uu": lambda t, x, u: np.ones(x.shape[:-1] + (1, 1)),
    }
    cset = ControlSet.finite([-1.0, 0.0, 1.0])
    problem = ControlProblem(
        state_dim=1, control_dim=1, horizon=1.0, x0=np.zeros(1),
        drift=tuple(drift(k) for k in range(ORDER + 1)),
        diffusion=tuple(diffusion(k) for k in range(ORDER + 1)),
        running_cost=tuple(running(k) for k in range(ORDER + 1)),
        terminal_cost=hk, control_set=cset, name="example1", control_derivatives=cd,
    )
    return Setup(problem, _constant_policy(0.0, cset),
                 "dx = b(x)u dt + u dW, b = b0 + b1 sin x; J = E[∫u²/2 - x(1)²/2]; ū = 0",
                 {"b0": b0, "b1": b1})


def example2(sign: float = 1.0) -> Setup:
    """dx = (u-1) dt + (x-u) dW from x0 = 1, h = sign·(x-1)⁴/24, ū ≡ 1."""
    problem = polynomial_problem(
        drift=[[-1.0, 1.0]], diffusion=[[0.0, -1.0], [1.0, 0.0]],
        terminal_cost=[0, 0, 0, 0, sign / 24.0], terminal_center=1.0,
        x0=1.0, horizon=1.0, name="example2",
    )
    return Setup(problem, _constant_policy(1.0, problem.control_set),
                 "dx = (u-1)dt + (x-u)dW, x0 = 1; J = E|x(1)-1|⁴/24; ū = 1",
                 {"sign": sign})


def lq(a: float = 0.5, s: float = 0.3, r: float = 1.0, g: float = 1.0, x0: float = 0.0,
       umax: float = 4.0, suboptimal: bool = False) -> Setup:
    """dx = (a x + u) dt + s dW, J = E[∫ r u²/2 dt + g x(1)].

    The base control is the exact minimiser of the Euler-discretised problem,
    ū_i = -(g/r)(1 + aΔt)^(N-1-i), or ū ≡ 0 when ``suboptimal``.
    """
    probe = tuple(np.linspace(-umax, umax, 9))
    cset = ControlSet(predicate=lambda u: bool(np.all(np.abs(u) <= umax + 1e-12)),
                      probe_points=probe)
    base_problem = polynomial_problem(
        drift=[[0.0, 1.0], [a, 0.0]], diffusion=[[s]], running_cost=[[0.0, 0.0, 0.5 * r]],
        terminal_cost=[0.0, g], x0=x0, horizon=1.0, controls=probe, name="lq",
    )
    problem = replace(base_problem, control_set=cset)

    def base(grid: TimeGrid) -> ControlPolicy:
        if suboptimal:
            return ControlPolicy(base=lambda t: np.zeros(1), control_set=cset)
        N, dt = grid.steps, grid.dt

        def ubar(t):
            i = int(round(t / dt))
            return np.array([-(g / r) * (1.0 + a * dt) ** (N - 1 - i)])

        return ControlPolicy(base=ubar, control_set=cset)

    return Setup(problem, base, "dx = (a x + u)dt + s dW; J = E[∫ r u²/2 + g x(1)]",
                 {"a": a, "s": s, "r": r, "g": g, "x0": x0, "umax": umax, "suboptimal": suboptimal})


def gbm(a: float = 0.2, c: float = 0.5, x0: float = 1.0, quadratic: bool = False) -> Setup:
    """dx = (a x + u) dt + c x dW, f = 0, h = x (or x²/2), ū ≡ 0.

    With h = x the first adjoint is p₁ = -e^{a(T-t)}; with h = x²/2 it is
    p₁ = -e^{(2a + c²)(T-t)} x(t), q₁ = c p₁.
    """
    terminal = [0.0, 0.0, 0.5] if quadratic else [0.0, 1.0]
    problem = polynomial_problem(
        drift=[[0.0, 1.0], [a, 0.0]], diffusion=[[0.0], [c]], terminal_cost=terminal,
        x0=x0, horizon=1.0, name="gbm",
    )
    return Setup(problem, _constant_policy(0.0, problem.control_set),
                 "dx = (a x + u)dt + c x dW; h = x or x²/2; ū = 0",
                 {"a": a, "c": c, "x0": x0, "quadratic": quadratic})


def polynomial(drift, diffusion, running_cost=((0.0,),), terminal_cost=(0.0,),
               terminal_center: float = 0.0, center: float = 0.0, x0: float = 0.0,
               horizon: float = 1.0, controls=(-1.0, 0.0, 1.0), base: float = 0.0) -> Setup:
    """Scalar polynomial coefficients given as nested coefficient lists, constant base control."""
    problem = polynomial_problem(drift, diffusion, running_cost, terminal_cost, terminal_center,
                                 center, x0, horizon, controls)
    return Setup(problem, _constant_policy(base, problem.control_set),
                 "user polynomial family", {"base": base})


REGISTRY: dict[str, Callable[..., Setup]] = {
    "example1": example1,
    "example2": example2,
    "lq": lq,
    "gbm": gbm,
    "polynomial": polynomial,
}


def build(problem_id: str, **params) -> Setup:
    if problem_id not in REGISTRY:
        raise UsageError(f"unknown problem '{problem_id}'; known: {', '.join(REGISTRY)}")
    try:
        return REGISTRY[problem_id](**params)
    except TypeError as exc:
        raise UsageError(f"bad parameters for '{problem_id}': {exc}") from exc


def describe() -> list[tuple[str, str]]:
    out = []
    for key, fn in REGISTRY.items():
        doc = (fn.__doc__ or "").strip().splitlines()
        out.append((key, doc[0] if doc else ""))
    return out
