"""Controlled SDE problems, Brownian ensembles, control policies and Euler-Maruyama simulation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "UsageError",
    "SimulationDivergedError",
    "SpikeAlignmentError",
    "ControlSet",
    "ControlProblem",
    "TimeGrid",
    "PathEnsemble",
    "Spike",
    "ControlPolicy",
    "simulate_state",
    "evaluate_cost",
    "estimate_cost",
    "cost_difference_crn",
    "check_problem",
    "DIVERGENCE_BOUND",
]

DIVERGENCE_BOUND = 1e6
DEFAULT_BLOCK = 8192


class UsageError(ValueError):
    """Inputs are inconsistent with the requested operation."""


class SimulationDivergedError(RuntimeError):
    def __init__(self, path: int, step: int):
        super().__init__(f"simulation diverged on path {path} at step {step}")
        self.path = path
        self.step = step


class SpikeAlignmentError(UsageError):
    """A spike interval does not fall on grid nodes."""


@dataclass(frozen=True)
class ControlSet:
    """Either a finite list of points, or a predicate together with a finite probe set."""

    points: Optional[tuple] = None
    predicate: Optional[Callable[[np.ndarray], bool]] = None
    probe_points: Optional[tuple] = None

    def __post_init__(self):
        if self.points is None and self.predicate is None:
            raise UsageError("control set needs points or a predicate")
        if self.points is not None:
            pts = tuple(np.atleast_1d(np.asarray(p, dtype=float)) for p in self.points)
            object.__setattr__(self, "points", pts)
        if self.probe_points is not None:
            pts = tuple(np.atleast_1d(np.asarray(p, dtype=float)) for p in self.probe_points)
            object.__setattr__(self, "probe_points", pts)

    @classmethod
    def finite(cls, points: Sequence) -> "ControlSet":
        return cls(points=tuple(points))

    def contains(self, u, tol: float = 1e-12) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.points is not None:
            return any(p.shape == u.shape and np.max(np.abs(p - u)) <= tol for p in self.points)
        return bool(self.predicate(u))

    @property
    def probe(self) -> tuple:
        """The finite probe set V used by the condition tests."""
        if self.probe_points is not None:
            return self.probe_points
        if self.points is not None:
            return self.points
        raise UsageError("predicate control set without probe points")


def _fixed_shape(fn, shape):
    def wrapped(t, x, u):
        out = np.asarray(fn(t, x, u), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + shape)

    return wrapped


@dataclass(frozen=True)
class ControlProblem:
    """dx = b dt + σ dW, cost E[∫f dt + h(x(T))].

    Each of ``drift``, ``diffusion`` and ``running_cost`` is a sequence of
    callables ``(t, x, u)``: entry k is the k-th x-derivative. ``x`` has shape
    ``batch + (n,)`` and ``u`` shape ``batch + (m,)``. ``terminal_cost``
    holds callables of ``x`` only. Derivative k of the drift returns shape
    ``batch + (n,) + (n,)*k``; for scalar maps drop the leading ``n``.

    ``control_derivatives`` optionally maps ``b_u, b_uu, sigma_u, sigma_uu,
    f_u, f_uu`` to callables ``(t, x, u)``; ``malliavin_s`` optionally gives a
    closed form ``(t, x, v) -> ∇𝕊``.
    """

    state_dim: int
    control_dim: int
    horizon: float
    x0: np.ndarray
    drift: tuple
    diffusion: tuple
    running_cost: tuple
    terminal_cost: tuple
    control_set: ControlSet
    name: str = "problem"
    control_derivatives: Optional[dict] = None
    malliavin_s: Optional[Callable] = None
    lipschitz_bound: float = 1e3

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise UsageError("state and control dimensions must be positive")
        if not self.horizon > 0:
            raise UsageError("horizon must be positive")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.state_dim,):
            raise UsageError(f"x0 must have shape ({self.state_dim},)")
        object.__setattr__(self, "x0", x0)
        for name in ("drift", "diffusion", "running_cost", "terminal_cost"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def max_derivative(self) -> int:
        return min(len(self.drift), len(self.diffusion), len(self.running_cost),
                   len(self.terminal_cost)) - 1

    def _get(self, table, name, k):
        if k >= len(table):
            raise UsageError(f"{self.name}: {name} derivative of order {k} not supplied")
        return table[k]

    def _u(self, x, u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(u, x.shape[:-1] + (self.control_dim,))

    def b(self, t, x, u, k: int = 0) -> np.ndarray:
        n = self.state_dim
        fn = self._get(self.drift, "drift", k)
        out = np.asarray(fn(t, x, self._u(x, u)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (n,) * (k + 1))

    def sigma(self, t, x, u, k: int = 0) -> np.ndarray:
        n = self.state_dim
        fn = self._get(self.diffusion, "diffusion", k)
        out = np.asarray(fn(t, x, self._u(x, u)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (n,) * (k + 1))

    def f(self, t, x, u, k: int = 0) -> np.ndarray:
        fn = self._get(self.running_cost, "running cost", k)
        out = np.asarray(fn(t, x, self._u(x, u)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.state_dim,) * k)

    def h(self, x, k: int = 0) -> np.ndarray:
        fn = self._get(self.terminal_cost, "terminal cost", k)
        out = np.asarray(fn(x), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.state_dim,) * k)

    def control_derivative(self, name: str, t, x, u) -> np.ndarray:
        if not self.control_derivatives or name not in self.control_derivatives:
            raise UsageError(f"{self.name}: control derivative {name} not available")
        n, m = self.state_dim, self.control_dim
        shapes = {"b_u": (n, m), "b_uu": (n, m, m), "sigma_u": (n, m),
                  "sigma_uu": (n, m, m), "f_u": (m,), "f_uu": (m, m)}
        out = np.asarray(self.control_derivatives[name](t, x, self._u(x, u)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + shapes[name])


def check_problem(problem: ControlProblem, samples: int = 64, seed: int = 0,
                  scale: float = 1.0) -> dict:
    """Shape check of every derivative callable and a sampled Lipschitz quotient.

    Returns the largest observed quotient per coefficient; raises UsageError
    on a shape mismatch or when a quotient exceeds ``problem.lipschitz_bound``.
    """
    rng = np.random.default_rng(seed)
    n, m = problem.state_dim, problem.control_dim
    x = problem.x0 + scale * rng.standard_normal((samples, n))
    xt = x + 1e-3 * scale * rng.standard_normal((samples, n))
    pts = problem.control_set.probe
    u = np.stack([pts[i % len(pts)] for i in range(samples)])
    t = float(rng.uniform(0, problem.horizon))
    for k in range(problem.max_derivative + 1):
        checks = [
            (problem.drift[k](t, x, u), (samples,) + (n,) * (k + 1), "drift"),
            (problem.diffusion[k](t, x, u), (samples,) + (n,) * (k + 1), "diffusion"),
            (problem.running_cost[k](t, x, u), (samples,) + (n,) * k, "running cost"),
            (problem.terminal_cost[k](x), (samples,) + (n,) * k, "terminal cost"),
        ]
        for value, shape, name in checks:
            try:
                np.broadcast_to(np.asarray(value), shape)
            except ValueError as exc:
                raise UsageError(f"{name} derivative {k}: shape {np.shape(value)} "
                                 f"not broadcastable to {shape}") from exc
    dx = np.linalg.norm(x - xt, axis=-1)
    quotients = {
        "drift": np.linalg.norm(problem.b(t, x, u) - problem.b(t, xt, u), axis=-1) / dx,
        "diffusion": np.linalg.norm(problem.sigma(t, x, u) - problem.sigma(t, xt, u), axis=-1) / dx,
    }
    out = {k: float(np.max(v)) for k, v in quotients.items()}
    for k, v in out.items():
        if v > problem.lipschitz_bound:
            raise UsageError(f"{k} Lipschitz quotient {v:.3g} exceeds bound {problem.lipschitz_bound}")
    return out


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    horizon: float

    def __post_init__(self):
        if self.steps < 1:
            raise UsageError("step count must be positive")
        if not self.horizon > 0:
            raise UsageError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def index(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a node."""
        r = t / self.dt
        i = int(round(r))
        if abs(r - i) > tol * max(1.0, abs(r)) or not 0 <= i <= self.steps:
            raise SpikeAlignmentError(f"time {t} is not a node of a grid with dt={self.dt}")
        return i


@dataclass
class PathEnsemble:
    """Brownian increments for M paths on a grid, generated in fixed-size seeded blocks.

    Block b uses ``default_rng([seed, b])`` so any subset of blocks can be
    regenerated bit-identically without holding the full M x N array.
    """

    grid: TimeGrid
    path_count: int
    seed: int = 0
    block_size: int = DEFAULT_BLOCK
    states: Optional[np.ndarray] = None
    aborted: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.path_count < 1:
            raise UsageError("path count must be positive")

    @property
    def block_count(self) -> int:
        return -(-self.path_count // self.block_size)

    def block(self, b: int) -> np.ndarray:
        lo = b * self.block_size
        size = min(self.block_size, self.path_count - lo)
        rng = np.random.default_rng([self.seed, b])
        return rng.standard_normal((size, self.grid.steps)) * np.sqrt(self.grid.dt)

    def blocks(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (first path index, increments) per block."""
        for b in range(self.block_count):
            yield b * self.block_size, self.block(b)

    @property
    def dW(self) -> np.ndarray:
        return np.concatenate([blk for _, blk in self.blocks()], axis=0)

    def export_csv(self, path) -> None:
        np.savetxt(path, self.dW, delimiter=",", fmt="%.17g")

    def export_npy(self, path) -> None:
        np.save(path, self.dW)

    def digest(self) -> str:
        h = hashlib.sha256()
        for _, blk in self.blocks():
            h.update(blk.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Spike:
    """Needle perturbation u = v on [tau, tau + eps)."""

    tau: float
    eps: float
    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value", np.atleast_1d(np.asarray(self.value, dtype=float)))
        if self.eps < 0 or self.tau < 0:
            raise UsageError("spike start and length must be nonnegative")

    def cells(self, grid: TimeGrid) -> tuple[int, int]:
        """(first cell, number of cells) of the spike on ``grid``."""
        start = grid.index(self.tau)
        end = grid.index(self.tau + self.eps)
        if end > grid.steps:
            raise SpikeAlignmentError("spike interval exceeds the horizon")
        return start, end - start


@dataclass(frozen=True)
class ControlPolicy:
    """Piecewise-constant deterministic control ``base(t_i)`` on cell i, plus an optional spike."""

    base: Callable[[float], np.ndarray]
    control_set: ControlSet
    spike: Optional[Spike] = None

    def with_spike(self, spike: Optional[Spike]) -> "ControlPolicy":
        return replace(self, spike=spike)

    def base_value(self, i: int, grid: TimeGrid) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.base(i * grid.dt), dtype=float))

    def value(self, i: int, grid: TimeGrid) -> np.ndarray:
        if self.spike is not None:
            start, count = self.spike.cells(grid)
            if start <= i < start + count:
                return self.spike.value
        return self.base_value(i, grid)

    def values(self, grid: TimeGrid) -> np.ndarray:
        """Control on every cell, shape (N, m)."""
        return np.stack([self.value(i, grid) for i in range(grid.steps)])

    def validate(self, grid: TimeGrid) -> None:
        if self.spike is not None:
            self.spike.cells(grid)
        for i in range(grid.steps):
            u = self.value(i, grid)
            if not self.control_set.contains(u):
                raise UsageError(f"control {u} at cell {i} is outside the control set")


def _simulate_block(problem: ControlProblem, controls: np.ndarray, grid: TimeGrid,
                    dW: np.ndarray, first_path: int = 0, keep: bool = True):
    """Euler-Maruyama for one block. Returns (states or final state, running cost, aborted)."""
    M = dW.shape[0]
    dt = grid.dt
    x = np.broadcast_to(problem.x0, (M, problem.state_dim)).copy()
    aborted = np.zeros(M, dtype=bool)
    running = np.zeros(M)
    states = np.empty((M, grid.steps + 1, problem.state_dim)) if keep else None
    if keep:
        states[:, 0] = x
    for i in range(grid.steps):
        t = i * dt
        u = controls[i]
        running += problem.f(t, x, u) * dt
        x_new = x + problem.b(t, x, u) * dt + problem.sigma(t, x, u) * dW[:, i : i + 1]
        bad = ~np.all(np.isfinite(x_new), axis=-1) & ~aborted
        if bad.any():
            raise SimulationDivergedError(first_path + int(np.argmax(bad)), i)
        big = np.any(np.abs(x_new) > DIVERGENCE_BOUND, axis=-1)
        aborted |= big
        x = np.where(aborted[:, None], x, x_new)
        if keep:
            states[:, i + 1] = x
    return (states if keep else x), running, aborted


def simulate_state(problem: ControlProblem, policy: ControlPolicy,
                   paths: PathEnsemble) -> PathEnsemble:
    """Fill ``states`` (M, N+1, n) by Euler-Maruyama. Paths leaving |x| <= 1e6 are frozen and flagged."""
    if paths.grid.horizon != problem.horizon:
        raise UsageError("grid horizon differs from problem horizon")
    policy.validate(paths.grid)
    controls = policy.values(paths.grid)
    parts, flags = [], []
    for first, dW in paths.blocks():
        states, _, aborted = _simulate_block(problem, controls, paths.grid, dW, first)
        parts.append(states)
        flags.append(aborted)
    return replace(paths, states=np.concatenate(parts), aborted=np.concatenate(flags))


def _path_costs(problem, policy, grid, states):
    controls = policy.values(grid)
    dt = grid.dt
    total = np.zeros(states.shape[0])
    for i in range(grid.steps):
        total += problem.f(i * dt, states[:, i], controls[i]) * dt
    return total + problem.h(states[:, -1])


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        raise UsageError("no usable paths")
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, se


def evaluate_cost(problem: ControlProblem, policy: ControlPolicy,
                  paths: PathEnsemble) -> tuple[float, float]:
    """Monte Carlo cost and standard error from already simulated states."""
    if paths.states is None:
        raise UsageError("states not simulated; call simulate_state first")
    costs = _path_costs(problem, policy, paths.grid, paths.states)
    keep = ~paths.aborted if paths.aborted is not None else np.ones(costs.size, bool)
    return _mean_se(costs[keep])


def estimate_cost(problem: ControlProblem, policy: ControlPolicy,
                  paths: PathEnsemble) -> tuple[float, float, int]:
    """Streamed cost estimate that never stores trajectories. Returns (J, se, aborted count)."""
    policy.validate(paths.grid)
    controls = policy.values(paths.grid)
    costs, flags = [], []
    for first, dW in paths.blocks():
        x, running, aborted = _simulate_block(problem, controls, paths.grid, dW, first, keep=False)
        costs.append(running + problem.h(x))
        flags.append(aborted)
    costs, flags = np.concatenate(costs), np.concatenate(flags)
    mean, se = _mean_se(costs[~flags])
    return mean, se, int(flags.sum())


def cost_difference_crn(problem: ControlProblem, base: ControlPolicy, perturbed: ControlPolicy,
                        paths: PathEnsemble) -> tuple[float, float]:
    """J(perturbed) - J(base) from pathwise paired differences on one ensemble."""
    if paths.states is not None and paths.states.shape[1] != paths.grid.steps + 1:
        raise UsageError("ensemble states do not match its grid")
    grid = paths.grid
    if grid.horizon != problem.horizon:
        raise UsageError("grid horizon differs from problem horizon")
    base.validate(grid)
    perturbed.validate(grid)
    cb, cp = base.values(grid), perturbed.values(grid)
    diffs, flags = [], []
    for first, dW in paths.blocks():
        xb, rb, ab = _simulate_block(problem, cb, grid, dW, first, keep=False)
        if np.array_equal(cb, cp):
            xp, rp, ap = xb, rb, ab
        else:
            xp, rp, ap = _simulate_block(problem, cp, grid, dW, first, keep=False)
        diffs.append((rp + problem.h(xp)) - (rb + problem.h(xb)))
        flags.append(ab | ap)
    diffs, flags = np.concatenate(diffs), np.concatenate(flags)
    return _mean_se(diffs[~flags])
