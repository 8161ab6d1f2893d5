"""Forward simulation and the output-coincidence check for families of
indistinguishable states and inputs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
import sympy as sp
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .expr import TIME, Expr, ExprError
from .model import Model, Scenario, split_derivative

if TYPE_CHECKING:  # pragma: no cover
    from .codistribution import UioResult
    from .flows import FamilySolution

RTOL = 1e-10
ATOL = 1e-12
DOMAIN_SLACK = -1e-9


class SimulationError(ExprError):
    pass


class OdeBlowup(SimulationError):
    pass


class DomainViolation(SimulationError):
    pass


class NoRootInDomain(ExprError):
    pass


class NonUniqueRoot(ExprError):
    def __init__(self, msg, roots=()):
        super().__init__(msg)
        self.roots = list(roots)


def vector_function(exprs: Sequence[Expr], symbols: Sequence[sp.Symbol]) -> Callable:
    """Numeric function of ``symbols`` returning an array (len(exprs), ...)
    that broadcasts over array arguments."""
    exprs = [sp.sympify(e) for e in exprs]
    f = sp.lambdify(list(symbols), exprs, modules=["numpy"])

    def call(*args):
        vals = f(*args)
        shape = np.broadcast(*args).shape if args else ()
        return np.array([np.broadcast_to(np.asarray(v, dtype=float), shape) for v in vals]) if vals else np.zeros((0,) + shape)

    return call


@dataclass
class Trajectory:
    time_grid: np.ndarray
    state: np.ndarray  # (T, n)
    u: np.ndarray  # (T, m_u)
    w: np.ndarray  # (T, m_w)
    y: np.ndarray  # (T, p)
    state_names: tuple = ()
    input_names: tuple = ()
    output_names: tuple = ()
    u_fn: Callable | None = field(default=None, repr=False, compare=False)

    def column(self, name: str) -> np.ndarray:
        if name in self.state_names:
            return self.state[:, self.state_names.index(name)]
        if name in self.input_names:
            return self.w[:, self.input_names.index(name)]
        if name in self.output_names:
            return self.y[:, self.output_names.index(name)]
        raise KeyError(name)


def _inputs_fn(exprs, syms, k):
    if k == 0:
        return lambda t, x=None: np.zeros(0)
    f = vector_function(exprs, syms)
    return f


def simulate(
    m: Model,
    x0: Sequence[float],
    u_fn: Callable | None = None,
    w_fn: Callable | None = None,
    grid: Sequence[float] = (0.0, 1.0),
    rtol: float = RTOL,
    atol: float = ATOL,
    max_step: float = np.inf,
    check_domain: bool = True,
) -> Trajectory:
    """Integrate the model with RK45. ``u_fn(t)`` and ``w_fn(t, x)`` return
    the input vectors."""
    grid = np.asarray(grid, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (m.n,):
        raise ValueError(f"initial state has {x0.size} entries, model has {m.n}")
    syms = list(m.state) + list(m.known_inputs) + list(m.unknown_inputs) + [TIME]
    rhs = vector_function(m.rhs(), syms)
    out = vector_function(m.outputs, list(m.state) + [TIME])
    u_fn = u_fn or (lambda t: np.zeros(m.m_u))
    w_fn = w_fn or (lambda t, x: np.zeros(m.m_w))

    def f(t, x):
        return rhs(*x, *np.atleast_1d(u_fn(t)), *np.atleast_1d(w_fn(t, x)), t)

    def blow(t, x):
        return 1e15 - np.max(np.abs(x))

    blow.terminal = True
    sol = solve_ivp(f, (grid[0], grid[-1]), x0, method="RK45", t_eval=grid, rtol=rtol, atol=atol,
                    max_step=max_step, events=blow)
    if sol.status != 0 or sol.y.shape[1] != grid.size:
        raise OdeBlowup(f"integration stopped at t={sol.t[-1] if sol.t.size else grid[0]:.6g}: {sol.message}")
    X = sol.y.T
    if check_domain:
        for i, s in enumerate(m.state):
            if s in m.positive and X[:, i].min() < DOMAIN_SLACK * max(1.0, np.abs(X[:, i]).max()):
                raise DomainViolation(f"{s.name} becomes negative ({X[:, i].min():.3g})")
    U = np.array([np.atleast_1d(u_fn(t)) for t in grid]).reshape(grid.size, m.m_u)
    W = np.array([np.atleast_1d(w_fn(t, x)) for t, x in zip(grid, X)]).reshape(grid.size, m.m_w)
    Y = out(*X.T, grid).T.reshape(grid.size, m.p)
    return Trajectory(grid, X, U, W, Y, tuple(s.name for s in m.state), tuple(w.name for w in m.unknown_inputs),
                      tuple(m.output_names), u_fn)


# --------------------------------------------------------------------------
# scenarios


def time_grid(scenario: Scenario, step: float | None = None) -> np.ndarray:
    t0, t1 = scenario.time_span
    h = step or scenario.time_step or (t1 - t0) / 200
    k = int(round((t1 - t0) / h))
    return np.linspace(t0, t1, k + 1)


def _signal(scenario: Scenario, name: str) -> Expr:
    base, k = split_derivative(name)
    if base not in scenario.signals:
        raise SimulationError(f"no signal given for {base}")
    return sp.diff(scenario.signals[base], TIME, k) if k else scenario.signals[base]


def scenario_inputs(E: Model, scenario: Scenario, ui_map: dict | None = None):
    """Initial state of ``E`` and input functions built from a scenario of
    the original model (absorbed inputs start at their signal values)."""
    t0 = scenario.time_span[0]
    x0 = []
    for s in E.state:
        if s.name in scenario.initial:
            x0.append(float(scenario.initial[s.name]))
        else:
            x0.append(float(_signal(scenario, s.name).subs(TIME, t0)))
    u_exprs = [_signal(scenario, u.name) for u in E.known_inputs]
    u_f = vector_function(u_exprs, [TIME]) if u_exprs else None
    ui_map = ui_map or {}
    w_exprs = []
    for w in E.unknown_inputs:
        e = sp.sympify(ui_map.get(w.name, w))
        subs = {s: _signal(scenario, s.name) for s in e.free_symbols if s not in E.state and s != TIME}
        w_exprs.append(e.subs(subs))
    w_f = vector_function(w_exprs, list(E.state) + [TIME]) if w_exprs else None

    def u_fn(t):
        return u_f(t).reshape(-1) if u_f else np.zeros(0)

    def w_fn(t, x):
        return w_f(*x, t).reshape(-1) if w_f else np.zeros(0)

    return np.array(x0), u_fn, w_fn


def base_trajectory(u: "UioResult", scenario: Scenario | None = None, grid=None) -> Trajectory:
    """Simulate the system E of an analysis from the model's scenario."""
    scenario = scenario or u.original.scenario
    if scenario is None:
        raise SimulationError("the model file has no scenario (initial/signals/time)")
    x0, u_fn, w_fn = scenario_inputs(u.model, scenario, dict(u.extension.ui_map))
    grid = time_grid(scenario) if grid is None else np.asarray(grid, dtype=float)
    return simulate(u.model, x0, u_fn, w_fn, grid)


# --------------------------------------------------------------------------
# verification


@dataclass
class VerifyOutcome:
    max_abs_dev: list
    max_rel_dev: float
    passed: bool
    tolerance: float
    per_tau: list  # dicts: tau, max_rel_dev, max_abs_dev, state_dev, passed, note

    def record(self) -> dict:
        return {
            "pass": self.passed,
            "tolerance": self.tolerance,
            "max_rel_dev": self.max_rel_dev,
            "max_abs_dev": self.max_abs_dev,
            "per_tau": self.per_tau,
        }


def _rel(a, b):
    scale = np.max(np.abs(b), axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return np.max(np.abs(a - b), axis=0) / scale


def verify_family(m: Model, base: Trajectory, fam: "FamilySolution", tol: float = 1e-5) -> VerifyOutcome:
    """Re-simulate from every family member and compare outputs with the base.

    The member's unknown inputs are cubic splines through its grid values.
    """
    if fam.time_grid.shape != base.time_grid.shape or not np.allclose(fam.time_grid, base.time_grid):
        raise ValueError("family and base trajectory use different time grids")
    if fam.tau_grid.size == 0:
        raise ValueError("empty tau grid")
    grid = base.time_grid
    if base.u_fn is not None:
        u_fn = base.u_fn
    elif m.m_u:
        us = CubicSpline(grid, base.u, axis=0)
        u_fn = lambda t: us(t)  # noqa: E731
    else:
        u_fn = None
    per_tau, worst_abs, worst = [], np.zeros(m.p), 0.0
    for k, tau in enumerate(fam.tau_grid):
        entry = {"tau": float(tau)}
        if not fam.valid[:, k].all():
            entry.update(passed=False, note="family truncated before this tau")
            per_tau.append(entry)
            worst = np.inf
            continue
        W = fam.w_prime[:, k, :]
        spl = CubicSpline(grid, W, axis=0) if W.shape[1] else None

        def w_fn(t, x, spl=spl):
            return spl(t) if spl is not None else np.zeros(0)

        try:
            traj = simulate(m, fam.x_prime[0, k, :], u_fn, w_fn, grid, check_domain=False)
        except SimulationError as exc:
            entry.update(passed=False, note=str(exc))
            per_tau.append(entry)
            worst = np.inf
            continue
        abs_dev = np.max(np.abs(traj.y - base.y), axis=0)
        rel = float(np.max(_rel(traj.y, base.y)))
        state_dev = float(np.max(_rel(traj.state, fam.x_prime[:, k, :])))
        entry.update(max_rel_dev=rel, max_abs_dev=[float(a) for a in abs_dev], state_dev=state_dev,
                     passed=bool(rel <= tol))
        per_tau.append(entry)
        worst_abs = np.maximum(worst_abs, abs_dev)
        worst = max(worst, rel)
    passed = all(e["passed"] for e in per_tau)
    return VerifyOutcome([float(a) for a in worst_abs], float(worst), passed, tol, per_tau)


# --------------------------------------------------------------------------
# single-measurement disambiguation


@dataclass
class ProbeResult:
    tau: float
    parameters: dict
    roots: list


def minimal_info_probe(
    point_at: Callable[[float], dict],
    extra_output: Expr,
    measurement: float,
    tau_range: tuple[float, float],
    samples: int = 201,
    xtol: float = 1e-12,
    flat_tol: float = 1e-12,
) -> ProbeResult:
    """Find the family parameter tau at which ``extra_output`` evaluated on
    the family member equals ``measurement``.

    ``point_at(tau)`` returns the member's values at the measurement time as a
    name -> value mapping (states and unknown inputs).
    """
    e = sp.sympify(extra_output)
    syms = sorted(e.free_symbols, key=lambda s: s.name)
    f = sp.lambdify(syms, e, modules=["numpy"])

    def g(tau):
        pt = point_at(tau)
        return float(f(*[pt[s.name] for s in syms])) - measurement

    lo, hi = tau_range
    taus = np.linspace(lo, hi, samples)
    vals = np.array([g(t) for t in taus])
    ok = np.isfinite(vals)
    if not ok.any():
        raise NoRootInDomain("extra output could not be evaluated on the family")
    scale = max(1.0, abs(measurement))
    if np.ptp(vals[ok]) <= flat_tol * scale:
        if np.all(np.abs(vals[ok]) <= flat_tol * scale):
            raise NonUniqueRoot("extra output is constant along the family: every tau matches", taus[ok])
        raise NoRootInDomain("extra output is constant along the family and never matches")
    roots = []
    for a, b, va, vb in zip(taus[:-1], taus[1:], vals[:-1], vals[1:]):
        if not (np.isfinite(va) and np.isfinite(vb)):
            continue
        if va == 0:
            roots.append(float(a))
        elif va * vb < 0:
            roots.append(float(brentq(g, a, b, xtol=xtol, rtol=4 * np.finfo(float).eps)))
    if np.isfinite(vals[-1]) and vals[-1] == 0:
        roots.append(float(taus[-1]))
    roots = sorted(set(roots))
    if not roots:
        raise NoRootInDomain("no tau in the range reproduces the measurement")
    if len(roots) > 1:
        raise NonUniqueRoot(f"{len(roots)} values of tau reproduce the measurement", roots)
    return ProbeResult(roots[0], point_at(roots[0]), roots)
