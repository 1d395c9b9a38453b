"""Test functionals ℋ, 𝕊, 𝕋 and the first- and second-order necessary-condition checks.

All evaluators are batch aware: ``x`` has shape (M, n) and adjoint values
are passed as a list ``[(p1, q1), ..., (p4, q4)]`` whose entries carry the
same leading batch axis (see ``AdjointSet.values``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np

from .problem import ControlPolicy, ControlProblem, PathEnsemble, TimeGrid, UsageError
from .tensor import (
    compose_slot,
    compose_two_slots,
    contract_slot,
    contract_two_slots,
    pair_codomain,
)

__all__ = [
    "LocalData",
    "local_data",
    "hamiltonian",
    "script_h",
    "script_h_x",
    "script_h_xx",
    "frak_s_diff",
    "frak_s_x_diff",
    "frak_t_diff",
    "script_s",
    "script_s_x",
    "script_t",
    "functionals",
    "VERDICTS",
    "verdict",
    "global_verdict",
    "ConditionReport",
    "first_order_check",
    "singular_check",
    "classical_singular_check",
    "second_order_pointwise_test",
    "second_order_zero_s_test",
    "MartingaleKernel",
    "martingale_kernel",
    "PartialPlusEstimate",
    "partial_plus_estimate",
    "second_order_integral_test",
    "CLOSED_FORM_TOL",
    "DEFAULT_MULTIPLE",
]

CLOSED_FORM_TOL = 1e-8
DEFAULT_MULTIPLE = 3.0
VERDICTS = ("satisfied", "violated", "inconclusive")


# ---------------------------------------------------------------------------
# local coefficient data
# ---------------------------------------------------------------------------


@dataclass
class LocalData:
    """Derivatives at (t, x) under ū (``sbar``) and the differences δφ_{x^k} = φ(v) - φ(ū)."""

    db: list
    ds: list
    df: list
    sbar: list


def local_data(problem: ControlProblem, t: float, x: np.ndarray, ubar, v,
               order: int = 2) -> LocalData:
    def diff(fn, k):
        return fn(t, x, v, k) - fn(t, x, ubar, k)

    return LocalData(
        db=[diff(problem.b, k) for k in range(order + 1)],
        ds=[diff(problem.sigma, k) for k in range(order + 1)],
        df=[diff(problem.f, k) for k in range(order + 1)],
        sbar=[problem.sigma(t, x, ubar, k) for k in range(order + 1)],
    )


def hamiltonian(problem: ControlProblem, t: float, x: np.ndarray, u, y1: np.ndarray,
                z1: np.ndarray) -> np.ndarray:
    """ℍ = <y1, b> + <z1, σ> - f."""
    b = problem.b(t, x, u)
    s = problem.sigma(t, x, u)
    return np.sum(y1 * b, axis=-1) + np.sum(z1 * s, axis=-1) - problem.f(t, x, u)


def script_h(ld: LocalData, p1, q1, p2) -> np.ndarray:
    """ℋ = ℍ(v) - ℍ(ū) + ½ p2(δσ, δσ)."""
    ds = ld.ds[0]
    quad = contract_slot(contract_slot(p2, ds, 2, 2), ds, 1, 1)
    return np.sum(p1 * ld.db[0], -1) + np.sum(q1 * ds, -1) - ld.df[0] + 0.5 * quad


def script_h_x(ld: LocalData, p1, q1, p2) -> np.ndarray:
    """x-gradient of ℋ with the adjoints held fixed."""
    ds, ds1 = ld.ds[0], ld.ds[1]
    out = pair_codomain(p1, ld.db[1]) + pair_codomain(q1, ds1) - ld.df[1]
    out = out + 0.5 * contract_slot(compose_slot(p2, ds1, 1, 2), ds, 2, 2)
    out = out + 0.5 * contract_slot(compose_slot(p2, ds1, 2, 2), ds, 1, 2)
    return out


def _bilinear(p, arity: int, fixed: dict, wslot: int, zslot: int, wmap=None, zmap=None):
    """(w, z) ↦ p(...) with vectors at ``fixed`` slots, wmap·w at wslot and zmap·z at zslot."""
    arr = p
    if wmap is not None:
        arr = compose_slot(arr, wmap, wslot, arity)
    if zmap is not None:
        arr = compose_slot(arr, zmap, zslot, arity)
    a = arity
    for slot in sorted(fixed, reverse=True):
        arr = contract_slot(arr, fixed[slot], slot, a)
        a -= 1
    return arr if wslot < zslot else np.swapaxes(arr, -1, -2)


def script_h_xx(ld: LocalData, p1, q1, p2) -> np.ndarray:
    """Hessian of ℋ in x (adjoints fixed), as a bilinear form."""
    ds, ds1, ds2 = ld.ds
    out = pair_codomain(p1, ld.db[2]) + pair_codomain(q1, ds2) - ld.df[2]
    out = out + 0.5 * pair_codomain(contract_slot(p2, ds, 2, 2), ds2)
    out = out + 0.5 * pair_codomain(contract_slot(p2, ds, 1, 2), ds2)
    out = out + 0.5 * _bilinear(p2, 2, {}, 1, 2, ds1, ds1)
    out = out + 0.5 * _bilinear(p2, 2, {}, 2, 1, ds1, ds1)
    return out


def frak_s_diff(ld: LocalData, p2, q2) -> np.ndarray:
    """𝔖(v) - 𝔖(ū) = ½ Σ_k [p2 •_k δb + q2 •_k δσ]."""
    out = 0.0
    for k in (1, 2):
        out = out + contract_slot(p2, ld.db[0], k, 2) + contract_slot(q2, ld.ds[0], k, 2)
    return 0.5 * out


def frak_s_x_diff(ld: LocalData, p2, q2) -> np.ndarray:
    """x-derivative of 𝔖(v) - 𝔖(ū); slot 1 is the 𝔖 slot, slot 2 the direction."""
    db1, ds1 = ld.db[1], ld.ds[1]
    out = _bilinear(p2, 2, {}, 2, 1, zmap=db1) + _bilinear(p2, 2, {}, 1, 2, zmap=db1)
    out = out + _bilinear(q2, 2, {}, 2, 1, zmap=ds1) + _bilinear(q2, 2, {}, 1, 2, zmap=ds1)
    return 0.5 * out


def frak_t_diff(ld: LocalData, p3, q3) -> np.ndarray:
    """𝔗(v) - 𝔗(ū) = ⅓ Σ_k [p3 •_k δb + q3 •_k δσ]."""
    out = 0.0
    for k in (1, 2, 3):
        out = out + contract_slot(p3, ld.db[0], k, 3) + contract_slot(q3, ld.ds[0], k, 3)
    return out / 3.0


def _s_sigma_terms(ld: LocalData, p2) -> np.ndarray:
    """½[p2 ∘_1 σ_x(ū)] •_2 δσ + ½[p2 ∘_2 σ_x(ū)] •_1 δσ."""
    sx, ds = ld.sbar[1], ld.ds[0]
    return 0.5 * (contract_slot(compose_slot(p2, sx, 1, 2), ds, 2, 2)
                  + contract_slot(compose_slot(p2, sx, 2, 2), ds, 1, 2))


def _s_p3_terms(ld: LocalData, p3) -> np.ndarray:
    """(1/6) Σ_{k<l≤3} p3 •_{k,l}(δσ, δσ)."""
    ds = ld.ds[0]
    return sum(contract_two_slots(p3, ds, ds, k, l, 3) for k, l in combinations((1, 2, 3), 2)) / 6.0


def script_s(ld: LocalData, adj: Sequence) -> np.ndarray:
    """𝕊 as a vector (linear form) at the points of ``ld``."""
    (p1, q1), (p2, q2), (p3, _) = adj[0], adj[1], adj[2]
    return (script_h_x(ld, p1, q1, p2) + frak_s_diff(ld, p2, q2)
            + _s_sigma_terms(ld, p2) + _s_p3_terms(ld, p3))


def script_s_x(ld: LocalData, adj: Sequence) -> np.ndarray:
    """x-derivative of 𝕊 with adjoints fixed; slot 1 is the 𝕊 slot, slot 2 the direction."""
    (p1, q1), (p2, q2), (p3, _) = adj[0], adj[1], adj[2]
    ds, ds1 = ld.ds[0], ld.ds[1]
    sx, sxx = ld.sbar[1], ld.sbar[2]
    out = script_h_xx(ld, p1, q1, p2) + frak_s_x_diff(ld, p2, q2)
    # ½ p2(σ_x(ū) w, δσ) and ½ p2(δσ, σ_x(ū) w)
    out = out + 0.5 * pair_codomain(contract_slot(p2, ds, 2, 2), sxx)
    out = out + 0.5 * _bilinear(p2, 2, {}, 1, 2, sx, ds1)
    out = out + 0.5 * _bilinear(p2, 2, {}, 2, 1, sx, ds1)
    out = out + 0.5 * pair_codomain(contract_slot(p2, ds, 1, 2), sxx)
    # (1/6) Σ_{k<l} p3 •_{k,l}(δσ, δσ): differentiate each δσ
    for k, l in combinations((1, 2, 3), 2):
        m = 6 - k - l
        out = out + _bilinear(p3, 3, {l: ds}, m, k, zmap=ds1) / 6.0
        out = out + _bilinear(p3, 3, {k: ds}, m, l, zmap=ds1) / 6.0
    return out


def script_t(ld: LocalData, adj: Sequence) -> np.ndarray:
    """𝕋 as a bilinear form of shape batch + (n, n)."""
    (p2, q2), (p3, q3), (p4, _) = adj[1], adj[2], adj[3]
    ds, ds1 = ld.ds[0], ld.ds[1]
    sx = ld.sbar[1]
    out = script_s_x(ld, adj) + frak_s_x_diff(ld, p2, q2) + frak_t_diff(ld, p3, q3)
    out = out + 0.5 * (compose_two_slots(p2, sx, ds1, 1, 2, 2) + compose_two_slots(p2, sx, ds1, 2, 1, 2))
    for k in (1, 2, 3):
        for l in (1, 2, 3):
            if l == k:
                continue
            out = out + contract_slot(compose_slot(p3, ds1, k, 3), ds, l, 3) / 6.0
            out = out + contract_slot(compose_slot(p3, sx, k, 3), ds, l, 3) / 3.0
    out = out + sum(contract_two_slots(p4, ds, ds, k, l, 4)
                    for k, l in combinations((1, 2, 3, 4), 2)) / 12.0
    return out


def functionals(problem: ControlProblem, t: float, x: np.ndarray, ubar, v, adj: Sequence):
    """(ℋ, 𝕊, 𝕋) at (t, x, v) for batched x."""
    ld = local_data(problem, t, x, ubar, v)
    (p1, q1), (p2, _) = adj[0], adj[1]
    return script_h(ld, p1, q1, p2), script_s(ld, adj), script_t(ld, adj)


# ---------------------------------------------------------------------------
# verdicts and reports
# ---------------------------------------------------------------------------


def verdict(value: float, err: float, multiple: float = DEFAULT_MULTIPLE,
            tol: float = CLOSED_FORM_TOL) -> str:
    """'violated' only if value exceeds multiple × err by more than tol; 'satisfied' if value ≤ tol."""
    if not np.isfinite(value):
        return "inconclusive"
    if value - multiple * err > tol:
        return "violated"
    if value <= tol:
        return "satisfied"
    return "inconclusive"


def global_verdict(verdicts: Sequence[str]) -> str:
    if any(v == "violated" for v in verdicts):
        return "violated"
    if any(v == "inconclusive" for v in verdicts):
        return "inconclusive"
    return "satisfied"


@dataclass
class ConditionReport:
    """Per-(t, v) test rows with a global verdict; ``a.e. t`` means every grid node, ``a.s.`` every sampled path."""

    test: str
    rows: list
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    HEADER = "t,v,term1,term2,term3,total,stderr,verdict"

    @property
    def verdict(self) -> str:
        return global_verdict([r["verdict"] for r in self.rows]) if self.rows else "satisfied"

    def max_total(self) -> float:
        return max((r["total"] for r in self.rows), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = self.HEADER.split(",")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "test": self.test,
            "verdict": self.verdict,
            "points": len(self.rows),
            "violations": sum(r["verdict"] == "violated" for r in self.rows),
            "max_total": self.max_total(),
            "scope": "all grid nodes x probe set V x sampled paths, with Monte Carlo error bars",
            "notes": self.notes,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, default=float)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.ndarray):
        return " ".join(repr(float(a)) for a in v.ravel())
    return v


def _vlabel(v) -> str:
    v = np.atleast_1d(v)
    return repr(float(v[0])) if v.size == 1 else " ".join(repr(float(a)) for a in v)


def _mean_err(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size <= 1:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def _mean_err_rows(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``_mean_err`` along the last axis of a (k, M) array."""
    values = np.asarray(values, dtype=float)
    m = values.mean(axis=-1)
    if values.shape[-1] <= 1:
        return m, np.zeros_like(m)
    return m, values.std(axis=-1, ddof=1) / np.sqrt(values.shape[-1])


def _sample_states(paths: PathEnsemble, sample: Optional[int]) -> np.ndarray:
    if paths.states is None:
        raise UsageError("base states not simulated")
    states = paths.states
    if sample is not None and states.shape[0] > sample:
        states = states[:sample]
    return states


def _probe(problem: ControlProblem, V) -> list:
    V = problem.control_set.probe if V is None else V
    return [np.atleast_1d(np.asarray(v, dtype=float)) for v in V]


def _node_indices(grid: TimeGrid, nodes) -> list:
    return list(range(grid.steps)) if nodes is None else list(nodes)


def _stacked(problem: ControlProblem, adjoints, i: int, t: float, x: np.ndarray, ub, V: list,
             order: int = 2):
    """Local data and adjoint values with the probe set stacked into the batch axis.

    Row ``j*M + m`` pairs probe ``V[j]`` with path ``m``; results reshape to (len(V), M).
    """
    X = np.concatenate([x] * len(V))
    U = np.repeat(np.stack(V), x.shape[0], axis=0)
    return local_data(problem, t, X, ub, U, order), adjoints.values(i, X)


def first_order_check(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                      adjoints, V=None, multiple: float = DEFAULT_MULTIPLE,
                      tol: float = CLOSED_FORM_TOL, sample: Optional[int] = 256,
                      nodes=None) -> ConditionReport:
    """ℋ(t, x̄(t), v) ≤ 0 at every node, probe and sampled path."""
    grid = paths.grid
    states = _sample_states(paths, sample)
    rows = []
    for i in _node_indices(grid, nodes):
        t = i * grid.dt
        x = states[:, i]
        ub = base.base_value(i, grid)
        probe = _probe(problem, V)
        ld, adj = _stacked(problem, adjoints, i, t, x, ub, probe, order=0)
        Hs = script_h(ld, adj[0][0], adj[0][1], adj[1][0]).reshape(len(probe), -1)
        for v, H, m, se in zip(probe, Hs, *_mean_err_rows(Hs)):
            m, se = float(m), float(se)
            rows.append({"t": t, "v": _vlabel(v), "term1": m, "term2": 0.0, "term3": 0.0,
                         "total": m, "stderr": se, "max_path": float(H.max()),
                         "verdict": verdict(m, se, multiple, tol)})
    return ConditionReport("first_order", rows)


def singular_check(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                   adjoints, V=None, tol: float = CLOSED_FORM_TOL, sample: Optional[int] = 256,
                   nodes=None) -> dict:
    """ℋ ≡ 0 on V: returns {'singular', 'max_abs', 'threshold'}.

    The threshold is ``tol`` plus three standard errors of the path mean.
    """
    grid = paths.grid
    states = _sample_states(paths, sample)
    worst, worst_thr, singular = 0.0, tol, True
    for i in _node_indices(grid, nodes):
        x = states[:, i]
        ub = base.base_value(i, grid)
        probe = _probe(problem, V)
        ld, adj = _stacked(problem, adjoints, i, i * grid.dt, x, ub, probe, order=0)
        Hs = script_h(ld, adj[0][0], adj[0][1], adj[1][0]).reshape(len(probe), -1)
        for m, se in zip(*_mean_err_rows(Hs)):
            m, se = float(m), float(se)
            thr = tol + DEFAULT_MULTIPLE * se
            if abs(m) > thr:
                singular = False
            if abs(m) > worst:
                worst, worst_thr = abs(m), thr
    return {"singular": singular, "max_abs": worst, "threshold": worst_thr}


def classical_singular_check(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                             adjoints, tol: float = CLOSED_FORM_TOL,
                             sample: Optional[int] = 256, nodes=None) -> dict:
    """ℍ_u = 0 and ℍ_uu + σ_uᵀ p2 σ_u = 0 along the base pair."""
    if not problem.control_derivatives:
        raise UsageError(f"{problem.name}: u-derivatives are not supplied")
    grid = paths.grid
    states = _sample_states(paths, sample)
    max_hu, max_huu = 0.0, 0.0
    for i in _node_indices(grid, nodes):
        t = i * grid.dt
        x = states[:, i]
        ub = base.base_value(i, grid)
        (p1, q1), (p2, _) = adjoints.values(i, x)[:2]
        bu = problem.control_derivative("b_u", t, x, ub)
        buu = problem.control_derivative("b_uu", t, x, ub)
        su = problem.control_derivative("sigma_u", t, x, ub)
        suu = problem.control_derivative("sigma_uu", t, x, ub)
        fu = problem.control_derivative("f_u", t, x, ub)
        fuu = problem.control_derivative("f_uu", t, x, ub)
        hu = np.einsum("...i,...ia->...a", p1, bu) + np.einsum("...i,...ia->...a", q1, su) - fu
        huu = (np.einsum("...i,...iab->...ab", p1, buu) + np.einsum("...i,...iab->...ab", q1, suu)
               - fuu)
        second = huu + np.einsum("...ia,...ij,...jb->...ab", su, p2, su)
        max_hu = max(max_hu, float(np.abs(hu.mean(0)).max()))
        max_huu = max(max_huu, float(np.abs(second.mean(0)).max()))
    return {"classical_singular": max_hu <= tol and max_huu <= tol,
            "max_abs_H_u": max_hu, "max_abs_H_uu_term": max_huu}


def _s_is_deterministic(S: np.ndarray, tol: float) -> bool:
    return bool(np.all(np.ptp(S, axis=0) <= tol * (1.0 + np.abs(S).max())))


def second_order_pointwise_test(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                                adjoints, V=None, malliavin: Optional[Callable] = None,
                                multiple: float = DEFAULT_MULTIPLE, tol: float = CLOSED_FORM_TOL,
                                sample: Optional[int] = 256, nodes=None) -> ConditionReport:
    """<𝕊, δb> + <∇𝕊, δσ> + ½<𝕋δσ, δσ> ≤ 0 pointwise.

    ∇𝕊 comes from ``malliavin`` or ``problem.malliavin_s`` when given;
    otherwise it is taken as zero where 𝕊 has no cross-path spread, and the
    point is reported inconclusive where it does.
    """
    grid = paths.grid
    states = _sample_states(paths, sample)
    provider = malliavin or problem.malliavin_s
    rows, notes = [], []
    for i in _node_indices(grid, nodes):
        t = i * grid.dt
        x = states[:, i]
        ub = base.base_value(i, grid)
        probe = _probe(problem, V)
        ld, adj = _stacked(problem, adjoints, i, t, x, ub, probe)
        k = len(probe)
        Ss = script_s(ld, adj)
        Ts = script_t(ld, adj)
        ds_all = ld.ds[0]
        t1s = np.sum(Ss * ld.db[0], -1).reshape(k, -1)
        t3s = 0.5 * np.einsum("...i,...ij,...j->...", ds_all, Ts, ds_all).reshape(k, -1)
        Ss = Ss.reshape((k, -1) + Ss.shape[1:])
        ds_all = ds_all.reshape((k, -1) + ds_all.shape[1:])
        for v, S, ds, term1, term3 in zip(probe, Ss, ds_all, t1s, t3s):
            if provider is not None:
                grad = np.broadcast_to(np.asarray(provider(t, x, v), dtype=float), S.shape)
                term2 = np.sum(grad * ds, -1)
            elif _s_is_deterministic(S, 1e-12):
                term2 = np.zeros_like(term1)
            else:
                term2 = np.full_like(term1, np.nan)
            total = term1 + term2 + term3
            m, se = _mean_err(total)
            if np.isnan(m):
                notes.append(f"t={t:.6g}, v={_vlabel(v)}: ∇𝕊 unavailable and 𝕊 is stochastic")
            rows.append({"t": t, "v": _vlabel(v), "term1": _mean_err(term1)[0],
                         "term2": float(np.mean(term2)), "term3": _mean_err(term3)[0],
                         "total": m, "stderr": se, "verdict": verdict(m, se, multiple, tol)})
    if notes:
        notes = notes[:5] + ([f"... {len(notes) - 5} more"] if len(notes) > 5 else [])
        notes.append("run the integral test instead where ∇𝕊 is unavailable")
    return ConditionReport("second_order_pointwise", rows, notes)


def second_order_zero_s_test(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                             adjoints, V=None, multiple: float = DEFAULT_MULTIPLE,
                             tol: float = CLOSED_FORM_TOL, sample: Optional[int] = 256,
                             nodes=None) -> ConditionReport:
    """<𝕋δσ, δσ> ≤ 0 where ū is singular and 𝕊 vanishes on V."""
    grid = paths.grid
    states = _sample_states(paths, sample)
    rows, max_s, singular = [], 0.0, True
    for i in _node_indices(grid, nodes):
        t = i * grid.dt
        x = states[:, i]
        ub = base.base_value(i, grid)
        probe = _probe(problem, V)
        ld, adj = _stacked(problem, adjoints, i, t, x, ub, probe)
        # same singularity rule as singular_check, reusing the stacked data
        Hs = script_h(ld, adj[0][0], adj[0][1], adj[1][0]).reshape(len(probe), -1)
        hm, hse = _mean_err_rows(Hs)
        singular = singular and bool(np.all(np.abs(hm) <= tol + DEFAULT_MULTIPLE * hse))
        max_s = max(max_s, float(np.abs(script_s(ld, adj)).max()))
        ds = ld.ds[0]
        qs = np.einsum("...i,...ij,...j->...", ds, script_t(ld, adj), ds).reshape(len(probe), -1)
        for v, m, se in zip(probe, *_mean_err_rows(qs)):
            m, se = float(m), float(se)
            rows.append({"t": t, "v": _vlabel(v), "term1": 0.0, "term2": 0.0, "term3": m,
                         "total": m, "stderr": se, "verdict": verdict(m, se, multiple, tol)})
    notes = []
    if not singular or max_s > tol:
        notes.append(f"hypotheses not met: singular={singular}, max|𝕊|={max_s:.3g}")
        for r in rows:
            if r["verdict"] != "satisfied":
                r["verdict"] = "inconclusive"
    return ConditionReport("second_order_zero_s", rows, notes,
                           {"singular": singular, "max_abs_S": max_s})


# ---------------------------------------------------------------------------
# martingale kernel and the ∂⁺ functional
# ---------------------------------------------------------------------------


def _monomials(x: np.ndarray, degree: int) -> np.ndarray:
    from .adjoint import polynomial_basis

    return polynomial_basis(x, degree)


@dataclass
class MartingaleKernel:
    """φ(s_i, t_j) for window nodes i < j as regression coefficients on a basis of x(s_i).

    ``coef[j, i]`` has shape (B, n); only entries with i < j are meaningful.
    ``mean[j]`` is E[𝕊(t_j)] (conditional on the window start when i0 > 0).
    """

    start: int
    coef: np.ndarray
    mean: np.ndarray
    degree: int
    residual: np.ndarray
    std_errors: np.ndarray

    @property
    def size(self) -> int:
        return self.coef.shape[0]

    def value(self, i: int, j: int, x: np.ndarray) -> np.ndarray:
        """φ(s_{start+i}, t_{start+j}) evaluated at states x of shape (M, n)."""
        if i >= j:
            raise UsageError("φ(s, t) is only defined for s < t on the grid")
        return _monomials(x, self.degree) @ self.coef[j, i]


def martingale_kernel(s_values: np.ndarray, states: np.ndarray, dW: np.ndarray, grid: TimeGrid,
                      degree: int = 2, window: Optional[tuple] = None) -> MartingaleKernel:
    """Regression estimate of the representation 𝕊(t) = E𝕊(t) + ∫φ(s, t) dW(s).

    ``s_values`` has shape (M, N+1, n) with 𝕊 along each path; ``states``
    (M, N+1, n) supplies the regression basis; ``window = (i0, i1)``
    restricts s and t to nodes i0..i1.
    """
    M = dW.shape[0]
    i0, i1 = (0, grid.steps) if window is None else window
    if not 0 <= i0 < i1 <= grid.steps:
        raise UsageError("kernel window outside the grid")
    K = i1 - i0 + 1
    n = s_values.shape[-1]
    bases = [_monomials(states[:, i0 + i], degree) for i in range(K)]
    B = bases[0].shape[1]
    coef = np.zeros((K, K, B, n))
    mean = np.zeros((K, n))
    ses = np.zeros((K, K, n))
    resid = np.zeros(K)
    dt = grid.dt
    X0 = bases[0]
    for j in range(K):
        Y = s_values[:, i0 + j]
        c0, *_ = np.linalg.lstsq(X0, Y, rcond=None)
        centred = Y - X0 @ c0
        mean[j] = (X0 @ c0).mean(axis=0)
        recon = np.zeros_like(Y)
        for i in range(j):
            X = bases[i]
            dw = dW[:, i0 + i][:, None]
            Z = centred * dw / dt
            c, *_ = np.linalg.lstsq(X, Z, rcond=None)
            coef[j, i] = c
            fitted = X @ c
            ses[j, i] = (Z - fitted).std(axis=0, ddof=1) / np.sqrt(M)
            recon = recon + fitted * dw
        var = float(np.mean(centred**2))
        resid[j] = float(np.mean((centred - recon) ** 2)) / var if var > 0 else 0.0
    return MartingaleKernel(i0, coef, mean, degree, resid, ses)


@dataclass
class PartialPlusEstimate:
    """Finite-θ values of (1/θ²)E∫∫<φ(s,t), Φ(τ)Φ(s)⁻¹δσ(s)> ds dt and the limsup proxy.

    ``half_partial`` estimates ½∂⁺ (max over the smallest rungs) and
    ``partial_plus`` is twice that.
    """

    thetas: list
    ratios: list
    std_errors: list
    half_partial: float
    partial_plus: float
    std_error: float


def partial_plus_estimate(kernel: MartingaleKernel, states: np.ndarray, transported: np.ndarray,
                          grid: TimeGrid, theta_steps: Sequence[int], smallest: int = 2
                          ) -> PartialPlusEstimate:
    """Double integral at each θ = k·Δt with trapezoid weight ½ on the last t node.

    ``transported[:, i]`` holds Φ(τ)Φ(s_i)⁻¹δσ(s_i) for window node i (shape (M, K, n)).
    """
    dt = grid.dt
    i0 = kernel.start
    kmax = max(theta_steps)
    if kmax >= kernel.size:
        raise UsageError("θ ladder exceeds the kernel window (τ too close to T)")
    M = states.shape[0]
    # inner[j] = Σ_{i<j} <φ(s_i, t_j), transported_i> Δt, per path
    inner = np.zeros((kmax + 1, M))
    for j in range(1, kmax + 1):
        for i in range(j):
            phi = kernel.value(i, j, states[:, i0 + i])
            inner[j] += np.sum(phi * transported[:, i], axis=-1) * dt
    thetas, ratios, ses = [], [], []
    for k in sorted(theta_steps, reverse=True):
        w = np.ones(k)
        w[-1] = 0.5
        per_path = (w[:, None] * inner[1 : k + 1]).sum(axis=0) * dt / (k * dt) ** 2
        thetas.append(k * dt)
        ratios.append(float(per_path.mean()))
        ses.append(float(per_path.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0)
    tail = np.argsort(thetas)[:smallest]
    pick = max(tail, key=lambda idx: ratios[idx])
    half = ratios[pick]
    return PartialPlusEstimate(thetas, ratios, ses, half, 2.0 * half, 2.0 * ses[pick])


def second_order_integral_test(problem: ControlProblem, base: ControlPolicy, paths: PathEnsemble,
                               adjoints, taus: Sequence[float], V=None,
                               theta_steps: Sequence[int] = (1, 2, 4, 8), degree: int = 2,
                               multiple: float = DEFAULT_MULTIPLE, tol: float = CLOSED_FORM_TOL
                               ) -> ConditionReport:
    """E<𝕊, δb> + ∂⁺ + ½E<𝕋δσ, δσ> ≤ 0 at each τ, using a regression kernel and Φ."""
    from .adjoint import fundamental_solution

    grid = paths.grid
    if paths.states is None:
        raise UsageError("base states not simulated")
    states = paths.states
    dW = paths.dW
    kmax = max(theta_steps)
    rows, extra = [], {"partial_plus": []}
    fs = fundamental_solution(problem, base, paths)
    for tau in taus:
        i_tau = grid.index(tau)
        if i_tau + kmax > grid.steps:
            raise UsageError(f"τ = {tau} too close to T for the θ ladder")
        window = (i_tau, i_tau + kmax)
        idx = range(window[0], window[1] + 1)
        for v in _probe(problem, V):
            s_vals = np.zeros(states.shape)
            transported = np.zeros((states.shape[0], kmax + 1, problem.state_dim))
            for i in idx:
                t = i * grid.dt
                x = states[:, i]
                ub = base.base_value(i, grid)
                ld = local_data(problem, t, x, ub, v)
                adj = adjoints.values(i, x)
                s_vals[:, i] = script_s(ld, adj)
                if i == i_tau:
                    S0, T0, db0, ds0 = s_vals[:, i], script_t(ld, adj), ld.db[0], ld.ds[0]
                rel = fs.phi[:, i_tau] @ fs.phi_inv[:, i]
                transported[:, i - i_tau] = np.einsum("mij,mj->mi", rel, ld.ds[0])
            kern = martingale_kernel(s_vals, states, dW, grid, degree, window)
            pp = partial_plus_estimate(kern, states, transported, grid, theta_steps)
            term1 = np.sum(S0 * db0, -1)
            term3 = 0.5 * np.einsum("mi,mij,mj->m", ds0, T0, ds0)
            m1, e1 = _mean_err(term1)
            m3, e3 = _mean_err(term3)
            total = m1 + pp.partial_plus + m3
            err = float(np.sqrt(e1**2 + pp.std_error**2 + e3**2))
            rows.append({"t": tau, "v": _vlabel(v), "term1": m1, "term2": pp.partial_plus,
                         "term3": m3, "total": total, "stderr": err,
                         "verdict": verdict(total, err, multiple, tol)})
            extra["partial_plus"].append({"t": tau, "v": _vlabel(v), "thetas": pp.thetas,
                                          "ratios": pp.ratios, "std_errors": pp.std_errors})
    notes = ["∂⁺ is a limsup; reported value is the max over the smallest θ rungs (estimate)"]
    return ConditionReport("second_order_integral", rows, notes, extra)
