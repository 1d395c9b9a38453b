"""Command-line front end: run configuration, orchestration, CSV/JSON/PNG outputs and a manifest per run."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .adjoint import duality_check, solve_adjoints
from .conditions import (
    CLOSED_FORM_TOL,
    DEFAULT_MULTIPLE,
    classical_singular_check,
    first_order_check,
    second_order_integral_test,
    second_order_pointwise_test,
    second_order_zero_s_test,
    singular_check,
)
from .problem import (
    PathEnsemble,
    SimulationDivergedError,
    TimeGrid,
    UsageError,
    evaluate_cost,
    simulate_state,
)
from .problems import REGISTRY, build, describe
from .tensor import ito_convergence, random_ito_instance
from .variational import epsilon_ladder, fit_orders, spike_family, taylor_check

EXIT_OK, EXIT_VIOLATED, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3
ITO_MIN_SLOPE = 0.4


@dataclass
class RunConfig:
    """Everything a command needs; every field has a default and all of them go into the manifest."""

    problem: str = "example2"
    params: dict = field(default_factory=dict)
    seed: int = 0
    steps: int = 1024
    paths: int = 2000
    eps_exponents: list = field(default_factory=lambda: [4, 5, 6, 7, 8, 9])
    theta_steps: list = field(default_factory=lambda: [1, 2, 4, 8])
    taus: list = field(default_factory=lambda: [0.25])
    V: Optional[list] = None
    spike_value: Optional[list] = None
    beta: float = 2.0
    orders: int = 4
    adjoint_method: str = "auto"
    degree: int = 2
    sample: int = 256
    tolerances: dict = field(default_factory=lambda: {
        "closed_form": CLOSED_FORM_TOL, "multiple": DEFAULT_MULTIPLE, "slopes": {},
        "ito_slope": ITO_MIN_SLOPE})
    ito: dict = field(default_factory=lambda: {
        "arities": [1, 2, 3], "dims": [1, 2], "levels": [6, 7, 8, 9, 10], "paths": 8000})
    out: str = "needlecheck-out"

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError("config: unknown field(s) " + ", ".join(unknown))
        cfg = cls()
        for key, value in data.items():
            if key in ("tolerances", "ito") and isinstance(value, dict):
                merged = dict(getattr(cfg, key))
                extra = sorted(set(value) - set(merged))
                if extra:
                    raise UsageError(f"config: unknown {key} field(s) " + ", ".join(extra))
                merged.update(value)
                value = merged
            setattr(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"config: cannot read {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config: top level must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of every field that can change numeric output (``out`` excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        errors = []
        if self.problem not in REGISTRY:
            errors.append(f"problem: unknown id '{self.problem}' (known: {', '.join(REGISTRY)})")
        for name in ("seed", "steps", "paths", "orders", "degree", "sample"):
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                errors.append(f"{name}: must be an integer")
        if isinstance(self.steps, int) and self.steps < 1:
            errors.append("steps: must be positive")
        if isinstance(self.paths, int) and self.paths < 1:
            errors.append("paths: must be positive")
        if isinstance(self.orders, int) and not 1 <= self.orders <= 4:
            errors.append("orders: must be in 1..4")
        if self.adjoint_method not in ("auto", "deterministic", "regression"):
            errors.append("adjoint_method: one of auto, deterministic, regression")
        if not isinstance(self.params, dict):
            errors.append("params: must be a mapping")
        if not self.beta > 0:
            errors.append("beta: must be positive")
        if errors:
            raise UsageError("invalid config:\n  " + "\n  ".join(errors))

    def validate_ladders(self, horizon: float, eps: bool = True) -> None:
        """τ (and ε when ``eps``) must be grid aligned; θ counts are whole steps."""
        errors = []
        grid = TimeGrid(self.steps, horizon)
        for k in self.eps_exponents if eps else ():
            ratio = horizon * 2.0 ** (-k) / grid.dt
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                errors.append(f"eps_exponents: ε = T·2^-{k} is not a multiple of Δt = {grid.dt:g}")
        for tau in self.taus:
            r = tau / grid.dt
            if abs(r - round(r)) > 1e-9 or not 0 <= tau < horizon:
                errors.append(f"taus: τ = {tau} is not a grid node in [0, T)")
        for k in self.theta_steps:
            if not isinstance(k, int) or k < 1:
                errors.append(f"theta_steps: {k} is not a positive integer")
        if errors:
            raise UsageError("invalid config:\n  " + "\n  ".join(errors))


@dataclass
class RunManifest:
    """Config hash, tool version, timestamps and the files a command wrote (with hashes)."""

    command: str
    config: dict
    config_hash: str
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, default=str)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, cfg.to_dict(), cfg.digest(), started=_now())

    def path(self, name: str) -> Path:
        return self.dir / name

    def record(self, path: Path) -> Path:
        self.manifest.outputs[path.name] = {
            "path": str(path), "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
        return path

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content)
        return self.record(p)

    def json(self, name: str, data) -> Path:
        return self.text(name, json.dumps(data, indent=2, default=_jsonable, ensure_ascii=False) + "\n")

    def rows(self, name: str, rows: list, fields: Optional[list] = None) -> Path:
        fields = fields or (list(rows[0]) if rows else [])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})
        return self.text(name, buf.getvalue())

    def figure(self, name: str, fn, *args, **kwargs) -> Path:
        return self.record(fn(*args, path=self.path(name), **kwargs))

    def finish(self, status: str) -> None:
        self.manifest.status = status
        self.manifest.finished = _now()
        (self.dir / f"manifest_{self.manifest.command}.json").write_text(self.manifest.to_json() + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    return str(v)


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------


def _setup(cfg: RunConfig, ladders: str = "none"):
    """``ladders``: 'none', 'tau' (τ and θ only) or 'all'."""
    cfg.validate()
    setup = build(cfg.problem, **cfg.params)
    problem = setup.problem
    if ladders != "none":
        cfg.validate_ladders(problem.horizon, eps=ladders == "all")
    grid = TimeGrid(cfg.steps, problem.horizon)
    base = setup.policy(grid)
    return setup, problem, grid, base


def _probe_set(cfg: RunConfig, problem) -> list:
    V = problem.control_set.probe if cfg.V is None else cfg.V
    return [np.atleast_1d(np.asarray(v, dtype=float)) for v in V]


def _spike_value(cfg: RunConfig, problem, base, grid) -> np.ndarray:
    if cfg.spike_value is not None:
        return np.atleast_1d(np.asarray(cfg.spike_value, dtype=float))
    ub = base.base_value(grid.index(cfg.taus[0]), grid)
    for v in _probe_set(cfg, problem):
        if not np.allclose(v, ub):
            return v
    return ub


def _eps(cfg: RunConfig, horizon: float) -> list:
    return epsilon_ladder(horizon, cfg.eps_exponents)


# ---------------------------------------------------------------------------
# commands; each returns an exit status
# ---------------------------------------------------------------------------


def cmd_examples(cfg: RunConfig, run: Run) -> int:
    rows = [{"id": k, "description": d} for k, d in describe()]
    for r in rows:
        print(f"{r['id']:<12} {r['description']}")
    run.rows("examples.csv", rows)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, run: Run) -> int:
    _, problem, grid, base = _setup(cfg)
    paths = simulate_state(problem, base, PathEnsemble(grid, cfg.paths, cfg.seed))
    J, se = evaluate_cost(problem, base, paths)
    keep = ~paths.aborted
    mean = paths.states[keep].mean(axis=0)
    std = paths.states[keep].std(axis=0)
    rows = []
    for i, t in enumerate(grid.nodes):
        r = {"t": float(t)}
        for j in range(problem.state_dim):
            r[f"mean_x{j + 1}"] = float(mean[i, j])
            r[f"std_x{j + 1}"] = float(std[i, j])
        rows.append(r)
    run.rows("trajectory.csv", rows)
    summary = {"problem": problem.name, "cost": J, "std_error": se,
               "aborted_paths": int(paths.aborted.sum()), "increments_sha256": paths.digest()}
    run.json("cost.json", summary)
    from .plotting import plot_trajectory

    run.figure("trajectory.png", plot_trajectory, grid.nodes, mean, std,
               title=f"{problem.name}: base trajectory")
    print(f"J = {J:.10g} ± {se:.3g} ({cfg.paths} paths, {int(paths.aborted.sum())} aborted)")
    return EXIT_OK


def _solve(cfg, problem, grid, base, orders=None):
    paths = PathEnsemble(grid, cfg.paths, cfg.seed)
    return solve_adjoints(problem, base, paths, orders or cfg.orders, cfg.adjoint_method,
                          cfg.degree)


def cmd_adjoint(cfg: RunConfig, run: Run, order: Optional[int] = None) -> int:
    _, problem, grid, base = _setup(cfg)
    top = order or cfg.orders
    adj = _solve(cfg, problem, grid, base, top)
    ks = [order] if order else list(range(1, top + 1))
    summary = {}
    for k in ks:
        sol = adj[k]
        run.text(f"adjoint_p{k}.csv", sol.to_csv())
        summary[f"p{k}"] = {"method": sol.method, "at_t0": sol.p_mean[0].tolist(),
                            "at_T": sol.p_mean[-1].tolist(), "diagnostics": sol.diagnostics}
        print(f"p{k}(0) = {np.array2string(sol.p_mean[0], precision=8)}  [{sol.method}]")
    run.json("adjoints.json", summary)
    from .plotting import plot_adjoints

    run.figure("adjoints.png", plot_adjoints, grid.nodes, {k: adj[k].p_mean for k in ks},
               title=f"{problem.name}: adjoint processes")
    return EXIT_OK


def classify(first: str, singular: bool, second: Optional[str]) -> str:
    """One-line verdict from the first-order, singularity and second-order results."""
    if first == "violated":
        return "first-order VIOLATED ⇒ not optimal"
    if not singular:
        return f"first-order {first}; not singular on V (second-order tests not applicable)"
    if second == "violated":
        return "singular; second-order VIOLATED ⇒ not optimal"
    if second == "satisfied":
        return "singular optimal candidate; second-order satisfied"
    return "singular; second-order inconclusive"


def cmd_check(cfg: RunConfig, run: Run) -> int:
    _, problem, grid, base = _setup(cfg, "tau")
    paths = simulate_state(problem, base, PathEnsemble(grid, cfg.paths, cfg.seed))
    adj = solve_adjoints(problem, base, paths, 4, cfg.adjoint_method, cfg.degree)
    V = _probe_set(cfg, problem)
    tol, mult = cfg.tolerances["closed_form"], cfg.tolerances["multiple"]
    kw = dict(V=V, tol=tol, sample=cfg.sample)
    reports = [first_order_check(problem, base, paths, adj, multiple=mult, **kw)]
    sing = singular_check(problem, base, paths, adj, **kw)
    extra = {"singular": sing}
    if problem.control_derivatives:
        extra["classical"] = classical_singular_check(problem, base, paths, adj, tol=tol,
                                                      sample=cfg.sample)
    pointwise = second_order_pointwise_test(problem, base, paths, adj, multiple=mult, **kw)
    zero_s = second_order_zero_s_test(problem, base, paths, adj, multiple=mult, **kw)
    integral = second_order_integral_test(problem, base, paths, adj, cfg.taus, V,
                                          tuple(cfg.theta_steps), cfg.degree, mult, tol)
    reports += [pointwise, zero_s, integral]
    from .plotting import plot_condition

    for rep in reports:
        run.text(f"check_{rep.test}.csv", rep.to_csv())
        run.text(f"check_{rep.test}.json", rep.to_json() + "\n")
        if rep.test != "second_order_integral":
            run.figure(f"check_{rep.test}.png", plot_condition, rep.rows, title=rep.test)
    # pointwise when it is conclusive everywhere, the integral form otherwise
    second = pointwise.verdict
    if second == "inconclusive":
        second = integral.verdict
    if zero_s.verdict == "violated" and not zero_s.notes:
        second = "violated"
    summary = {
        "problem": problem.name,
        "V": [v.tolist() for v in V],
        "verdicts": {rep.test: rep.verdict for rep in reports},
        **extra,
        "summary": classify(reports[0].verdict, sing["singular"], second),
        "note": "verdicts are relative to the probe set V",
    }
    run.json("check_summary.json", summary)
    print(summary["summary"])
    violated = any(rep.verdict == "violated" for rep in reports)
    return EXIT_VIOLATED if violated else EXIT_OK


def cmd_orders(cfg: RunConfig, run: Run) -> int:
    _, problem, grid, base = _setup(cfg, "all")
    v = _spike_value(cfg, problem, base, grid)
    spikes = spike_family(cfg.taus[0], _eps(cfg, problem.horizon), v)
    rep = fit_orders(problem, base, spikes, cfg.beta, PathEnsemble(grid, cfg.paths, cfg.seed),
                     tolerances=cfg.tolerances.get("slopes") or None)
    run.text("orders.csv", rep.to_csv())
    run.json("orders.json", {"tau": cfg.taus[0], "v": v.tolist(), **rep.summary()})
    from .plotting import plot_loglog

    run.figure("orders.png", plot_loglog, rep.eps, rep.moments,
               title=f"E sup|·|^{cfg.beta:g} against ε", errors=rep.std_errors,
               ylabel="moment")
    for q, s in rep.slopes.items():
        print(f"{q:<3} slope {s:8.4f}  expected {rep.expected[q]:.2f}  {rep.verdicts[q]}")
    return EXIT_VIOLATED if "fail" in rep.verdicts.values() else EXIT_OK


def _deterministic_adjoints(cfg, problem, grid, base):
    return solve_adjoints(problem, base, PathEnsemble(grid, 8, cfg.seed), 4, cfg.adjoint_method,
                          cfg.degree)


def cmd_taylor(cfg: RunConfig, run: Run) -> int:
    _, problem, grid, base = _setup(cfg, "all")
    adj = _deterministic_adjoints(cfg, problem, grid, base)
    paths = PathEnsemble(grid, cfg.paths, cfg.seed)
    eps = _eps(cfg, problem.horizon)
    rows, trends, ratios, bands = [], {}, {}, {}
    for tau in cfg.taus:
        for v in _probe_set(cfg, problem):
            rep = taylor_check(problem, base, spike_family(tau, eps, v), paths, adj)
            label = f"tau={tau:g}, v={' '.join(f'{a:g}' for a in v)}"
            for r, s in zip(rep.rows(), rep.signed):
                rows.append({"tau": tau, **r, "signed_remainder": s})
            trends[label] = rep.trend
            ratios[label], bands[label] = rep.ratio, rep.band
            print(f"{label}: {'pass' if rep.trend['pass'] else 'FAIL'}")
    run.rows("taylor.csv", rows)
    run.json("taylor.json", {"trend": trends})
    from .plotting import plot_ratio_ladder

    run.figure("taylor.png", plot_ratio_ladder, eps, ratios, bands, title="Taylor remainder")
    return EXIT_OK if all(t["pass"] for t in trends.values()) else EXIT_VIOLATED


def cmd_duality(cfg: RunConfig, run: Run) -> int:
    _, problem, grid, base = _setup(cfg, "all")
    adj = _deterministic_adjoints(cfg, problem, grid, base)
    v = _spike_value(cfg, problem, base, grid)
    eps = _eps(cfg, problem.horizon)
    rep = duality_check(problem, base, spike_family(cfg.taus[0], eps, v),
                        PathEnsemble(grid, cfg.paths, cfg.seed), adj)
    run.rows("duality.csv", rep.rows())
    run.json("duality.json", {"tau": cfg.taus[0], "v": v.tolist(),
                              "trend": {str(d): t for d, t in rep.trend.items()}})
    from .plotting import plot_ratio_ladder

    run.figure("duality.png", plot_ratio_ladder, eps,
               {f"identity {d}": rep.ratio[d - 1] for d in range(1, 5)},
               {f"identity {d}": rep.band[d - 1] for d in range(1, 5)},
               title="duality residual / ε²")
    for d, t in rep.trend.items():
        print(f"identity {d}: {'pass' if t['pass'] else 'FAIL'}")
    return EXIT_OK if all(t["pass"] for t in rep.trend.values()) else EXIT_VIOLATED


def cmd_ito_check(cfg: RunConfig, run: Run) -> int:
    ito = cfg.ito
    rng = np.random.default_rng(cfg.seed)
    rows, slopes, curves = [], {}, {}
    floor = cfg.tolerances.get("ito_slope", ITO_MIN_SLOPE)
    for d in ito["arities"]:
        for n in ito["dims"]:
            inst = random_ito_instance(d, n, rng)
            res = ito_convergence(inst, ito["levels"], ito["paths"], cfg.seed)
            label = f"d={d}, n={n}"
            for N, m, e in zip(res["steps"], res["mean_abs_residual"], res["std_error"]):
                rows.append({"arity": d, "dim": n, "steps": N, "mean_abs_residual": m,
                             "std_error": e})
            slopes[label] = {"slope": res["slope"], "pass": bool(res["slope"] >= floor)}
            curves[label] = res["mean_abs_residual"]
            print(f"{label}: slope {res['slope']:.3f} {'pass' if res['slope'] >= floor else 'FAIL'}")
    run.rows("ito.csv", rows)
    run.json("ito.json", {"min_slope": floor, "instances": slopes})
    from .plotting import plot_ito

    run.figure("ito.png", plot_ito, [2**k for k in ito["levels"]], curves)
    return EXIT_OK if all(s["pass"] for s in slopes.values()) else EXIT_VIOLATED


COMMANDS = {
    "simulate": cmd_simulate,
    "adjoint": cmd_adjoint,
    "check": cmd_check,
    "orders": cmd_orders,
    "taylor": cmd_taylor,
    "duality": cmd_duality,
    "ito-check": cmd_ito_check,
    "examples": cmd_examples,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="needlecheck",
        description="Spike-variation checks of first- and second-order necessary conditions.")
    parser.add_argument("--version", action="version", version=f"needlecheck {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate the base pair and estimate its cost",
        "adjoint": "solve the adjoint equations of orders 1..4",
        "check": "first-order, singular and second-order condition reports",
        "orders": "fit convergence orders of the variational expansion",
        "taylor": "Taylor remainder ladder of the cost expansion",
        "duality": "duality identities between adjoints and variational processes",
        "ito-check": "multilinear Itô formula residuals on random instances",
        "examples": "list the built-in problems",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--problem", help="registry id (see 'examples')")
        if name == "adjoint":
            p.add_argument("--order", type=int, choices=[1, 2, 3, 4],
                           help="write only this order")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    for key in ("seed", "paths", "steps", "out", "problem"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    cfg.validate()
    return cfg


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"needlecheck: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run = Run(args.command, cfg)
    try:
        fn = COMMANDS[args.command]
        code = fn(cfg, run, args.order) if args.command == "adjoint" else fn(cfg, run)
    except UsageError as exc:
        print(f"needlecheck: {exc}", file=sys.stderr)
        run.finish("usage error")
        return EXIT_USAGE
    except (SimulationDivergedError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"needlecheck: {type(exc).__name__}: {exc}", file=sys.stderr)
        run.finish("error")
        return EXIT_ERROR
    run.finish("violated" if code == EXIT_VIOLATED else "ok")
    return code


if __name__ == "__main__":
    sys.exit(main())
