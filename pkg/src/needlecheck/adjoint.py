"""Adjoint equations of orders 1..4, the fundamental solution Φ and the duality identities.

The k-th adjoint solves

    dp_k = -[D_k(p_k, q_k) + K_k] dt + q_k dW,    p_k(T) = -h_{x^k}(x̄(T)),

where D_k is the linear part (compositions with b_x, σ_x) and K_k the source
built from lower-order adjoints and higher derivatives of the coefficients.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations, combinations_with_replacement, product
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .problem import (
    ControlPolicy,
    ControlProblem,
    PathEnsemble,
    Spike,
    TimeGrid,
    UsageError,
    simulate_state,
)
from .tensor import (
    apply_form,
    apply_map,
    compose_slot,
    compose_two_slots,
    pair_codomain,
    pair_sum,
    pair_sum_mixed,
    slot_sum,
)

__all__ = [
    "polynomial_basis",
    "Coefficients",
    "coefficients",
    "hamiltonian_derivative",
    "drift_bx_term",
    "drift_sigma_pair_term",
    "drift_q_term",
    "linear_drift",
    "coupling_b_term",
    "coupling_q_term",
    "coupling_sigma_pair_term",
    "source_term",
    "adjoint_drift",
    "AdjointSolution",
    "AdjointSet",
    "solve_adjoint_deterministic",
    "solve_adjoint_regression",
    "solve_adjoints",
    "FundamentalSolution",
    "fundamental_solution",
    "DualityReport",
    "duality_check",
    "StochasticCoefficientsError",
]


class StochasticCoefficientsError(UsageError):
    """Raised when the deterministic solver sees path-dependent coefficients."""


def polynomial_basis(x: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree ≤ ``degree`` in the columns of x (M, n) → (M, B)."""
    M, n = x.shape
    cols = [np.ones(M)]
    for d in range(1, degree + 1):
        for idx in combinations_with_replacement(range(n), d):
            cols.append(np.prod(x[:, idx], axis=1))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# coefficients and drift terms
# ---------------------------------------------------------------------------


@dataclass
class Coefficients:
    """x-derivatives of b, σ, f at (t, x, u) for a batch of states; index k = order."""

    b: list
    s: list
    f: list


def coefficients(problem: ControlProblem, t: float, x: np.ndarray, u, order: int = 4) -> Coefficients:
    return Coefficients(
        b=[problem.b(t, x, u, k) for k in range(order + 1)],
        s=[problem.sigma(t, x, u, k) for k in range(order + 1)],
        f=[problem.f(t, x, u, k) for k in range(order + 1)],
    )


def hamiltonian_derivative(k: int, c: Coefficients, p1: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """ℍ_{x^k} = <p1, b_{x^k}> + <q1, σ_{x^k}> - f_{x^k}, a k-form."""
    return pair_codomain(p1, c.b[k]) + pair_codomain(q1, c.s[k]) - c.f[k]


def drift_bx_term(p: np.ndarray, k: int, c: Coefficients) -> np.ndarray:
    """Σ_i p ∘_i b_x."""
    return sum(compose_slot(p, c.b[1], i, k) for i in range(1, k + 1))


def drift_sigma_pair_term(p: np.ndarray, k: int, c: Coefficients) -> np.ndarray:
    """Σ_{i<j} p ∘_{i,j}(σ_x, σ_x)."""
    out = np.zeros(np.broadcast_shapes(p.shape[: p.ndim - k], c.s[1].shape[:-2]) + (p.shape[-1],) * k)
    for i, j in combinations(range(1, k + 1), 2):
        out = out + compose_two_slots(p, c.s[1], c.s[1], i, j, k)
    return out


def drift_q_term(q: np.ndarray, k: int, c: Coefficients) -> np.ndarray:
    """Σ_i q ∘_i σ_x."""
    return sum(compose_slot(q, c.s[1], i, k) for i in range(1, k + 1))


def linear_drift(k: int, p: np.ndarray, q: Optional[np.ndarray], c: Coefficients) -> np.ndarray:
    """D_k(p, q)."""
    out = drift_bx_term(p, k, c) + drift_sigma_pair_term(p, k, c)
    if q is not None:
        out = out + drift_q_term(q, k, c)
    return out


def coupling_b_term(p: np.ndarray, arity: int, c: Coefficients, order: int) -> np.ndarray:
    """Σ_i p ∘_i b_{x^order}: each slot of an ``arity``-form precomposed with an order-linear map."""
    return sum(compose_slot(p, c.b[order], i, arity, order) for i in range(1, arity + 1))


def coupling_q_term(q: np.ndarray, arity: int, c: Coefficients, order: int) -> np.ndarray:
    """Σ_i q ∘_i σ_{x^order}."""
    return sum(compose_slot(q, c.s[order], i, arity, order) for i in range(1, arity + 1))


def coupling_sigma_pair_term(p: np.ndarray, arity: int, c: Coefficients, first: int,
                             second: int) -> np.ndarray:
    """Σ_{k≠l} p ∘_{k,l}(σ_{x^first}, σ_{x^second}) over ordered slot pairs."""
    out = 0.0
    for k, l in product(range(1, arity + 1), repeat=2):
        if k != l:
            out = out + compose_two_slots(p, c.s[first], c.s[second], k, l, arity, first, second)
    return out


def source_term(k: int, c: Coefficients, lower: Sequence) -> np.ndarray:
    """K_k, the part of the k-th adjoint drift that does not involve (p_k, q_k).

    ``lower`` lists (p_j, q_j) for j < k with the same batch as ``c``.
    """
    if k == 1:
        return -c.f[1]
    p1, q1 = lower[0]
    if k == 2:
        return hamiltonian_derivative(2, c, p1, q1)
    p2, q2 = lower[1]
    if k == 3:
        out = 1.5 * (coupling_b_term(p2, 2, c, 2) + coupling_q_term(q2, 2, c, 2))
        out = out + 1.5 * coupling_sigma_pair_term(p2, 2, c, 1, 2)
        return out + hamiltonian_derivative(3, c, p1, q1)
    if k == 4:
        p3, q3 = lower[2]
        out = 2.0 * (coupling_b_term(p3, 3, c, 2) + coupling_q_term(q3, 3, c, 2))
        out = out + 2.0 * coupling_sigma_pair_term(p3, 3, c, 1, 2)
        out = out + 2.0 * coupling_b_term(p2, 2, c, 3)
        out = out + 2.0 * coupling_sigma_pair_term(p2, 2, c, 1, 3)
        out = out + 3.0 * compose_two_slots(p2, c.s[2], c.s[2], 1, 2, 2, 2, 2)
        out = out + 2.0 * coupling_q_term(q2, 2, c, 3)
        return out + hamiltonian_derivative(4, c, p1, q1)
    raise UsageError("adjoint order must be in 1..4")


def adjoint_drift(k: int, p: np.ndarray, q: Optional[np.ndarray], c: Coefficients,
                  lower: Sequence) -> np.ndarray:
    """D_k(p, q) + K_k; the backward equation reads dp = -adjoint_drift dt + q dW."""
    return linear_drift(k, p, q, c) + source_term(k, c, lower)


def _operator_matrices(k: int, c: Coefficients, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Matrices of p ↦ D_k(p, 0) and q ↦ Σ_i q∘_i σ_x on flattened n^k, batch-leading."""
    D = n**k
    basis = np.eye(D).reshape((D,) + (1,) * (c.b[1].ndim - 2) + (n,) * k)
    Lp = drift_bx_term(basis, k, c) + drift_sigma_pair_term(basis, k, c)
    Lq = drift_q_term(basis, k, c)

    def as_matrix(arr):
        arr = np.broadcast_to(arr, arr.shape[:1] + c.b[1].shape[:-2] + (n,) * k)
        flat = arr.reshape(D, -1, D)
        return np.moveaxis(flat, 0, -1)

    return as_matrix(Lp), as_matrix(Lq)


def _exp_step(L: np.ndarray, p: np.ndarray, forcing: np.ndarray, dt: float) -> np.ndarray:
    """e^{L dt} p + dt φ1(L dt) forcing, batched over leading axes."""
    D = p.shape[-1]
    if D == 1:
        z = L[..., 0, 0] * dt
        e = np.exp(z)
        small = np.abs(z) < 1e-12
        phi = np.where(small, 1.0 + 0.5 * z, np.expm1(z) / np.where(small, 1.0, z))
        return e[..., None] * p + dt * phi[..., None] * forcing
    batch = np.broadcast_shapes(L.shape[:-2], p.shape[:-1], forcing.shape[:-1])
    aug = np.zeros(batch + (D + 1, D + 1))
    aug[..., :D, :D] = L * dt
    aug[..., :D, D] = forcing * dt
    E = expm(aug)
    return np.einsum("...ij,...j->...i", E[..., :D, :D], np.broadcast_to(p, batch + (D,))) + E[..., :D, D]


# ---------------------------------------------------------------------------
# solution containers
# ---------------------------------------------------------------------------


@dataclass
class AdjointSolution:
    """(p_k, q_k) on the grid.

    Deterministic solutions keep one series in ``p_mean``/``q_mean``
    (shape (N+1, n^k)). Regression solutions also keep per-node basis
    coefficients ``p_coef``/``q_coef`` (shape (N+1, B, n^k)); the terminal
    value is always -h_{x^k} evaluated exactly.
    """

    order: int
    grid: TimeGrid
    dim: int
    method: str
    p_mean: np.ndarray
    q_mean: np.ndarray
    problem: Optional[ControlProblem] = None
    p_coef: Optional[np.ndarray] = None
    q_coef: Optional[np.ndarray] = None
    degree: int = 2
    diagnostics: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return (self.dim,) * self.order

    @property
    def deterministic(self) -> bool:
        return self.p_coef is None

    def at(self, i: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(p_k, q_k) at node i for states x (M, n), shaped (M,) + (n,)*k."""
        M = x.shape[0]
        out_shape = (M,) + self.shape
        if i == self.grid.steps and self.problem is not None and not self.deterministic:
            p = -np.broadcast_to(self.problem.h(x, self.order), out_shape)
        elif self.deterministic:
            p = np.broadcast_to(self.p_mean[i].reshape(self.shape), out_shape)
        else:
            p = (polynomial_basis(x, self.degree) @ self.p_coef[i]).reshape(out_shape)
        if self.deterministic:
            q = np.broadcast_to(self.q_mean[i].reshape(self.shape), out_shape)
        else:
            q = (polynomial_basis(x, self.degree) @ self.q_coef[i]).reshape(out_shape)
        return p, q

    def form(self, i: int):
        """Node-i value of p_k as a MultilinearForm (path mean for regression solutions)."""
        from .tensor import MultilinearForm

        return MultilinearForm(self.p_mean[i].reshape(self.shape))

    def to_csv(self) -> str:
        idx = ["".join(str(a + 1) for a in m) for m in product(range(self.dim), repeat=self.order)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"p{self.order}_{s}" for s in idx] + [f"q{self.order}_{s}" for s in idx])
        for i, t in enumerate(self.grid.nodes):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in self.p_mean[i]]
                       + [repr(float(v)) for v in self.q_mean[i]])
        return buf.getvalue()


class AdjointSet:
    """Adjoints of orders 1..k on one grid; missing orders evaluate to zero."""

    def __init__(self, grid: TimeGrid, solutions: Sequence[AdjointSolution]):
        self.grid = grid
        self.solutions = {s.order: s for s in solutions}
        for s in solutions:
            if s.grid != grid:
                raise UsageError("adjoint solutions live on different grids")

    def __getitem__(self, k: int) -> AdjointSolution:
        return self.solutions[k]

    @property
    def orders(self) -> list:
        return sorted(self.solutions)

    def values(self, i: int, x: np.ndarray, upto: int = 4) -> list:
        out = []
        for k in range(1, upto + 1):
            if k in self.solutions:
                out.append(self.solutions[k].at(i, x))
            else:
                z = np.zeros((x.shape[0],) + (x.shape[1],) * k)
                out.append((z, z))
        return out


# ---------------------------------------------------------------------------
# deterministic solver
# ---------------------------------------------------------------------------


def _check_deterministic(problem, base, grid, paths, seed, tol):
    ens = simulate_state(problem, base, PathEnsemble(grid, paths, seed))
    x = ens.states
    spread = float(np.ptp(x, axis=0).max())
    scale = 1.0 + float(np.abs(x).max())
    if spread > tol * scale:
        raise StochasticCoefficientsError(
            f"{problem.name}: base state is random (cross-path spread {spread:.3g}); "
            "use solve_adjoint_regression")
    return x[0]


class _NodeCoefficients:
    """Coefficients along a deterministic base path, cached by (node, control)."""

    def __init__(self, problem, base, grid, xpath):
        self.problem, self.base, self.grid, self.xpath = problem, base, grid, xpath
        self._cache: dict = {}

    def get(self, i: int, cell: int) -> Coefficients:
        u = self.base.base_value(cell, self.grid)
        key = (i, tuple(np.ravel(u)))
        if key not in self._cache:
            self._cache[key] = coefficients(self.problem, i * self.grid.dt, self.xpath[i][None], u)
        return self._cache[key]

    def stacked(self, nodes, cells) -> Coefficients:
        cs = [self.get(i, c) for i, c in zip(nodes, cells)]
        return Coefficients(*(
            [np.concatenate([getattr(c, name)[k] for c in cs]) for k in range(5)]
            for name in ("b", "s", "f")
        ))


def solve_adjoint_deterministic(problem: ControlProblem, base: ControlPolicy, grid: TimeGrid,
                                k: int, lower: Optional[AdjointSet] = None,
                                scheme: str = "exponential", check_paths: int = 8,
                                seed: int = 0, tol: float = 1e-12,
                                _nodes: Optional[_NodeCoefficients] = None) -> AdjointSolution:
    """Backward integration of the k-th adjoint with q_k = 0.

    Valid when x̄ is deterministic, checked by the cross-path spread of a
    small ensemble. ``scheme`` is "exponential" (exact for constant
    coefficients, cell-averaged coefficients) or "euler" (implicit).
    """
    if not 1 <= k <= 4:
        raise UsageError("adjoint order must be in 1..4")
    if scheme not in ("exponential", "euler"):
        raise UsageError(f"unknown scheme '{scheme}'")
    if k > 1 and (lower is None or any(j not in lower.solutions for j in range(1, k))):
        raise UsageError(f"order {k} needs adjoints of orders 1..{k - 1}")
    base.validate(grid)
    if _nodes is None:
        xpath = _check_deterministic(problem, base, grid, check_paths, seed, tol)
        _nodes = _NodeCoefficients(problem, base, grid, xpath)
    xpath = _nodes.xpath
    n = problem.state_dim
    N, dt = grid.steps, grid.dt
    D = n**k
    cells = np.arange(N)

    def side(nodes):
        c = _nodes.stacked(nodes, cells)
        low = []
        for j in range(1, k):
            sol = lower[j]
            shape = (len(nodes),) + (n,) * j
            low.append((sol.p_mean[nodes].reshape(shape), sol.q_mean[nodes].reshape(shape)))
        L, _ = _operator_matrices(k, c, n)
        K = np.broadcast_to(source_term(k, c, low), (len(nodes),) + (n,) * k).reshape(-1, D)
        return L, K

    L_left, K_left = side(cells)
    p = np.zeros((N + 1, D))
    p[N] = -problem.h(xpath[N][None], k).reshape(D)
    if scheme == "exponential":
        L_right, K_right = side(cells + 1)
        Lm = 0.5 * (L_left + L_right)
        Km = 0.5 * (K_left + K_right)
        for i in range(N - 1, -1, -1):
            p[i] = _exp_step(Lm[i], p[i + 1], Km[i], dt)
    else:
        A = np.eye(D) - dt * L_left
        for i in range(N - 1, -1, -1):
            p[i] = np.linalg.solve(A[i], p[i + 1] + dt * K_left[i])
    return AdjointSolution(k, grid, n, f"deterministic-{scheme}", p, np.zeros_like(p), problem)


# ---------------------------------------------------------------------------
# regression solver
# ---------------------------------------------------------------------------


def _lstsq(X: np.ndarray, Y: np.ndarray):
    coef, _, rank, sv = np.linalg.lstsq(X, Y, rcond=None)
    cond = float(sv[0] / sv[rank - 1]) if rank > 0 else np.inf
    return coef, int(rank), cond


def solve_adjoint_regression(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                             k: int, lower: Optional[AdjointSet] = None, degree: int = 2,
                             cond_limit: float = 1e12) -> AdjointSolution:
    """Least-squares Monte Carlo backward induction for (p_k, q_k).

    On each cell, Ŷ = E[p_k(t_{i+1}) | x̄(t_i)] and q̂ = E[(p_k(t_{i+1}) - Ŷ) ΔW / Δt | x̄(t_i)]
    by regression on monomials of x̄(t_i); then p_k(t_i) = e^{LΔt}Ŷ + Δt φ1(LΔt)(Q q̂ + K)
    per path, where L, Q are the linear drift operators at node i.
    """
    if not 1 <= k <= 4:
        raise UsageError("adjoint order must be in 1..4")
    if k > 1 and (lower is None or any(j not in lower.solutions for j in range(1, k))):
        raise UsageError(f"order {k} needs adjoints of orders 1..{k - 1}")
    if paths.states is None:
        raise UsageError("base states not simulated")
    grid = paths.grid
    n = problem.state_dim
    N, dt = grid.steps, grid.dt
    M = paths.path_count
    D = n**k
    B = polynomial_basis(np.zeros((1, n)), degree).shape[1]
    if M < 10 * B:
        raise UsageError(f"insufficient paths: {M} for a basis of size {B}")
    states = paths.states
    dW = paths.dW
    p_coef = np.zeros((N + 1, B, D))
    q_coef = np.zeros((N + 1, B, D))
    p_mean = np.zeros((N + 1, D))
    q_mean = np.zeros((N + 1, D))
    ranks, conds = np.zeros(N, dtype=int), np.zeros(N)
    p_next = -problem.h(states[:, N], k).reshape(M, D)
    p_mean[N] = p_next.mean(axis=0)
    XN = polynomial_basis(states[:, N], degree)
    p_coef[N] = _lstsq(XN, p_next)[0]
    for i in range(N - 1, -1, -1):
        x = states[:, i]
        X = polynomial_basis(x, degree)
        cy, rank, cond = _lstsq(X, p_next)
        ranks[i], conds[i] = rank, cond
        Yhat = X @ cy
        cq = _lstsq(X, (p_next - Yhat) * (dW[:, i] / dt)[:, None])[0]
        qhat = X @ cq
        c = coefficients(problem, i * dt, x, base.base_value(i, grid), order=k)
        L, Q = _operator_matrices(k, c, n)
        low = lower.values(i, x, k - 1) if k > 1 else []
        K = np.broadcast_to(source_term(k, c, low), (M,) + (n,) * k).reshape(M, D)
        forcing = np.einsum("...ij,...j->...i", Q, qhat) + K
        if D > 1 and np.ptp(L, axis=0).max() <= 1e-14 * (1.0 + np.abs(L).max()):
            L = L[:1]
        p_now = _exp_step(L, Yhat, forcing, dt)
        p_coef[i] = _lstsq(X, p_now)[0]
        q_coef[i] = cq
        p_mean[i] = p_now.mean(axis=0)
        q_mean[i] = qhat.mean(axis=0)
        p_next = p_now
    q_coef[N] = q_coef[N - 1]
    q_mean[N] = q_mean[N - 1]
    diag = {"rank_min": int(ranks.min()), "basis_size": B, "condition_max": float(conds.max()),
            "ill_conditioned_nodes": int((conds > cond_limit).sum()), "paths": M}
    return AdjointSolution(k, grid, n, "regression", p_mean, q_mean, problem, p_coef, q_coef,
                           degree, diag)


def solve_adjoints(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                   orders: int = 4, method: str = "auto", degree: int = 2,
                   scheme: str = "exponential") -> AdjointSet:
    """Orders 1..``orders``; ``method='auto'`` uses the deterministic solver when it applies."""
    grid = paths.grid
    if method not in ("auto", "deterministic", "regression"):
        raise UsageError(f"unknown adjoint method '{method}'")
    nodes = None
    if method in ("auto", "deterministic"):
        try:
            xpath = _check_deterministic(problem, base, grid, 8, paths.seed, 1e-12)
            nodes = _NodeCoefficients(problem, base, grid, xpath)
            method = "deterministic"
        except StochasticCoefficientsError:
            if method == "deterministic":
                raise
            method = "regression"
    sols: list = []
    for k in range(1, orders + 1):
        lower = AdjointSet(grid, sols)
        if method == "deterministic":
            sols.append(solve_adjoint_deterministic(problem, base, grid, k, lower, scheme,
                                                    seed=paths.seed, _nodes=nodes))
        else:
            if paths.states is None:
                paths = simulate_state(problem, base, paths)
            sols.append(solve_adjoint_regression(problem, base, paths, k, lower, degree))
    return AdjointSet(grid, sols)


# ---------------------------------------------------------------------------
# fundamental solution
# ---------------------------------------------------------------------------


@dataclass
class FundamentalSolution:
    """Φ and Φ⁻¹ per path and node, shaped (M, N+1, n, n)."""

    grid: TimeGrid
    phi: np.ndarray
    phi_inv: np.ndarray
    identity_error: float


def fundamental_solution(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                         tol: float = 1e-8) -> FundamentalSolution:
    """Euler scheme for dΦ = b_x Φ dt + σ_x Φ dW, Φ(0) = I, inverted node by node."""
    if paths.states is None:
        raise UsageError("base states not simulated")
    grid = paths.grid
    n = problem.state_dim
    M, N = paths.path_count, grid.steps
    dW = paths.dW
    phi = np.zeros((M, N + 1, n, n))
    phi[:, 0] = np.eye(n)
    for i in range(N):
        x = paths.states[:, i]
        u = base.base_value(i, grid)
        bx = problem.b(i * grid.dt, x, u, 1)
        sx = problem.sigma(i * grid.dt, x, u, 1)
        cur = phi[:, i]
        phi[:, i + 1] = cur + (bx @ cur) * grid.dt + (sx @ cur) * dW[:, i, None, None]
    try:
        inv = np.linalg.inv(phi)
    except np.linalg.LinAlgError as exc:
        raise UsageError(f"Φ is singular on some path: {exc}") from exc
    err = float(np.abs(phi @ inv - np.eye(n)).max())
    if not np.isfinite(err) or err > tol:
        raise UsageError(f"Φ is numerically singular (|ΦΦ⁻¹ - I| = {err:.3g})")
    return FundamentalSolution(grid, phi, inv, err)


# ---------------------------------------------------------------------------
# duality identities
# ---------------------------------------------------------------------------


IDENTITY_LABELS = {1: "E<h_x, xi(T)>", 2: "E h_xx(eta, eta)", 3: "E h_xxx(gamma^3)",
                   4: "E h_xxxx(y1^4)"}


@dataclass
class DualityReport:
    """Left side E[h^{(d)}(x̄(T))(x_d(T)^d)], right side -E∫(...)dt and residuals per spike."""

    eps: list
    lhs: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    std_error: np.ndarray
    control_variate: bool = False
    richardson: bool = False
    discretization: Optional[np.ndarray] = None
    trend: dict = field(default_factory=dict)

    @property
    def ratio(self) -> np.ndarray:
        return np.abs(self.residual) / np.asarray(self.eps)[None] ** 2

    @property
    def band(self) -> np.ndarray:
        """3σ statistical band plus the discretization allowance, in ratio units."""
        floor = 3.0 * self.std_error
        if self.discretization is not None:
            floor = floor + self.discretization
        return floor / np.asarray(self.eps)[None] ** 2

    def rows(self) -> list:
        out = []
        for d in range(4):
            for s, e in enumerate(self.eps):
                out.append({"identity": d + 1, "label": IDENTITY_LABELS[d + 1], "eps": e,
                            "lhs": float(self.lhs[d, s]), "rhs": float(self.rhs[d, s]),
                            "residual": float(self.residual[d, s]),
                            "std_error": float(self.std_error[d, s]),
                            "discretization": (float(self.discretization[d, s])
                                               if self.discretization is not None else 0.0),
                            "ratio": float(self.ratio[d, s]), "band": float(self.band[d, s])})
        return out


def _duality_block(problem, base, spikes, grid, dW, adjoints, control_variate):
    """Per-path left sides, right sides and martingale control variates, each (4, S, M)."""
    from .variational import _martingale_increment, march

    S, M = len(spikes), dW.shape[0]
    n = problem.state_dim
    dt = grid.dt
    lhs = np.zeros((4, S, M))
    integral = np.zeros((4, S, M))
    cv = np.zeros((4, S, M))
    for st in march(problem, base, spikes, grid, dW, max_order=4):
        if st.i == grid.steps:
            for d in range(1, 5):
                hd = problem.h(st.xbar, d)[None]
                if hd.any():
                    lhs[d - 1] = apply_form(hd, [sum(st.ys[: 5 - d])] * d)
            break
        if st.coeffs is None:
            continue
        c = st.coeffs
        cx = coefficients(problem, st.t, st.xbar, st.ubar, order=4)
        adj = adjoints.values(st.i, st.xbar)
        for d in range(1, 5):
            xd = sum(st.ys[: 5 - d])
            F = sum(st.F[: 5 - d])
            G = sum(st.G[: 5 - d])
            P, Q = adj[d - 1][0][None], adj[d - 1][1][None]
            val = 0.0
            if P.any():
                sx = apply_map(c.s[1], [xd])
                val = val + slot_sum(P, xd, F, d)
                if d > 1:
                    val = val + pair_sum_mixed(P, xd, sx, G, d) + pair_sum_mixed(P, xd, G, sx, d)
                    val = val + pair_sum(P, xd, G, d)
            if Q.any():
                val = val + slot_sum(Q, xd, G, d)
            K = source_term(d, cx, adj[: d - 1])[None]
            if K.any():
                val = val - apply_form(np.broadcast_to(K, (1, M) + K.shape[2:]), [xd] * d)
            integral[d - 1] += val * dt
            if control_variate:
                Pn = adjoints[d].p_mean[st.i + 1].reshape((1, 1) + (n,) * d)
                if Pn.any():
                    mean = xd + (apply_map(c.b[1], [xd]) + F) * dt
                    vol = apply_map(c.s[1], [xd]) + G
                    cv[d - 1] += _martingale_increment(-Pn, d, mean, vol, st.dw[None], dt)
    return lhs, -integral, cv


def duality_check(problem: ControlProblem, base: ControlPolicy, spikes: Sequence[Spike],
                  paths: PathEnsemble, adjoints: AdjointSet,
                  control_variate: Optional[bool] = None,
                  richardson: Optional[bool] = None) -> DualityReport:
    """Evaluate the four terminal/integral duality identities on common increments.

    For d = 1..4 the process x_d is ξ, η, γ, y1 (partial sums y1 + ... + y_{5-d}),
    whose forcings F, G are the matching partial sums of the variational forcings.
    Itô's formula for p_d(x_d, ..., x_d) gives

        E[h^{(d)}(x̄(T))(x_d(T)^d)] = -E∫ [Σ p_d(..F..) + Σ q_d(..G..)
             + Σ_{k≠l} p_d(..σ_x x_d..G..) + Σ_{k<l} p_d(..G..G..) - K_d(x_d^d)] dt.

    With deterministic adjoints the residual subtracts the exactly mean-zero
    martingale part of -p_d(x_d^d) along the Euler scheme and is extrapolated
    as 2R(Δt/2) - R(Δt) on bridge-refined increments (both on by default).
    The size of the extrapolation correction |R(Δt/2) - R(Δt)| bounds what
    is left of the time-step bias and is added to the noise floor.
    """
    from .variational import ladder_trend, refine_increments, refined_policy

    grid = paths.grid
    if adjoints.grid != grid:
        raise UsageError("adjoints were solved on a different grid")
    for sp in spikes:
        base.with_spike(sp).validate(grid)
    deterministic = all(k in adjoints.solutions and adjoints[k].deterministic for k in range(1, 5))
    control_variate = deterministic if control_variate is None else control_variate
    richardson = deterministic if richardson is None else richardson
    if (control_variate or richardson) and not deterministic:
        raise UsageError("the control variate and extrapolation need deterministic adjoints")
    if richardson:
        fine = TimeGrid(2 * grid.steps, grid.horizon)
        fine_base = refined_policy(base, grid)
        fine_adj = solve_adjoints(problem, fine_base, PathEnsemble(fine, 8, paths.seed), 4,
                                  method="deterministic")
    lhs_parts, rhs_parts, cv_parts, corr_parts = [], [], [], []
    for b, (_, dW) in enumerate(paths.blocks()):
        lhs, rhs, cv = _duality_block(problem, base, spikes, grid, dW, adjoints, control_variate)
        if richardson:
            rng = np.random.default_rng([paths.seed, b, 0xB81D6E])
            dWf = refine_increments(dW, grid.dt, rng)
            lf, rf, cf = _duality_block(problem, fine_base, spikes, fine, dWf, fine_adj,
                                        control_variate)
            corr_parts.append((lf - rf - cf) - (lhs - rhs - cv))
            lhs, rhs, cv = 2 * lf - lhs, 2 * rf - rhs, 2 * cf - cv
        lhs_parts.append(lhs)
        rhs_parts.append(rhs)
        cv_parts.append(cv)
    lhs = np.concatenate(lhs_parts, axis=2)
    rhs = np.concatenate(rhs_parts, axis=2)
    diff = lhs - rhs - np.concatenate(cv_parts, axis=2)
    Mtot = diff.shape[2]
    se = diff.std(axis=2, ddof=1) / np.sqrt(Mtot) if Mtot > 1 else np.zeros(diff.shape[:2])
    disc = np.abs(np.concatenate(corr_parts, axis=2).mean(axis=2)) if corr_parts else None
    rep = DualityReport([sp.eps for sp in spikes], lhs.mean(axis=2), rhs.mean(axis=2),
                        diff.mean(axis=2), se, control_variate=bool(control_variate),
                        richardson=bool(richardson), discretization=disc)
    rep.trend = {d + 1: ladder_trend(list(rep.ratio[d]), list(rep.band[d])) for d in range(4)}
    return rep
