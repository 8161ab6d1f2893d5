"""Observability codistribution of a system with unknown inputs.

``build_uio`` grows a set of observable scalar functions by Lie
differentiation along the drift, the known-input fields and the
unknown-input-corrected directions, keeping only functions whose
differential raises the generic rank. Alongside it tracks the unknown-input
degree of reconstructability and, when that stalls below the number of
unknown inputs, absorbs unknown inputs into the state.

``build_theta_codistribution`` constructs the codistribution over the state
augmented with the unknown inputs; membership of ``dw_j`` in it is an
independent check of the time-varying verdicts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import sympy as sp

from .diffgeo import (
    RANK_RTOL,
    CovectorField,
    PointCloud,
    RankTracker,
    differential,
    generic_rank,
    lie,
    lie_dot_drift,
    numeric_rank,
    symbolic_inverse,
)
from .expr import DEFAULT_BOX, DEFAULT_TOL, DEFAULT_TRIALS, TIME, Expr, ExprError, Sampler, is_zero, simplify, to_text
from .model import ExtensionRecord, Model, ModelError, split_derivative, uie_extend

log = logging.getLogger(__name__)


class DepthExhausted(ExprError):
    pass


class OverrideInvalid(ModelError):
    pass


@dataclass(frozen=True)
class UioOptions:
    depth: int = 12
    max_order: int = 4
    seed: int = 0
    trials: int = DEFAULT_TRIALS
    tol: float = DEFAULT_TOL
    rtol: float = RANK_RTOL
    box: tuple[float, float] = DEFAULT_BOX

    def sampler(self, positive=frozenset(), offset: int = 0) -> Sampler:
        return Sampler(np.random.default_rng(self.seed + offset), self.box, frozenset(positive))


@dataclass(frozen=True)
class UioResult:
    model: Model  # the system E
    original: Model
    extension: ExtensionRecord
    m: int
    h_tilde: tuple
    functions: tuple  # observable scalar functions whose differentials span O
    O: tuple  # CovectorField generators
    rank: int
    canonic: bool
    observable: bool
    certified: bool = True
    override: bool = False
    witness: dict = field(default_factory=dict)
    depth_used: int = 0
    options: UioOptions = field(default_factory=UioOptions)

    @property
    def n(self) -> int:
        return self.model.n

    def sampler(self, offset: int = 0) -> Sampler:
        return self.options.sampler(self.model.positive, offset)


# --------------------------------------------------------------------------
# closure


@dataclass
class _Closure:
    funcs: list
    m: int
    rows: list  # indices into funcs of h_tilde
    cols: list  # indices into the unknown inputs (pivots)
    nu: sp.Matrix | None
    certified: bool
    depth: int
    tracker: RankTracker

    @property
    def h_tilde(self):
        return [self.funcs[i] for i in self.rows]


def _cloud_symbols(E: Model) -> tuple:
    syms = list(E.state)
    if E.time_varying:
        syms.append(TIME)
    return tuple(syms)


def _select_pivots(E: Model, funcs: Sequence[Expr], cloud: PointCloud, rtol: float):
    """Greedy h_tilde choice: rows in function order, columns in input order."""
    if E.m_w == 0 or not funcs:
        return [], []
    RM = [lie(g, f, E.state) for f in funcs for g in E.g]
    if all(e == 0 for e in RM):
        return [], []
    vals = cloud.values(RM).reshape(len(cloud.points), len(funcs), E.m_w)
    best, A = -1, None
    for k in range(vals.shape[0]):
        if np.all(np.isfinite(vals[k])):
            r = numeric_rank(vals[k], rtol)
            if r > best:
                best, A = r, vals[k]
    if A is None:
        raise ExprError("reconstructability matrix could not be evaluated")
    rows, cols = [], []
    for i in range(len(funcs)):
        for j in range(E.m_w):
            if j in cols:
                continue
            if numeric_rank(A[np.ix_(rows + [i], cols + [j])], rtol) == len(rows) + 1:
                rows.append(i)
                cols.append(j)
                break
    return rows, cols


def _mu(E: Model, h_tilde, cols) -> sp.Matrix:
    # mu[a, b] = L_{g^{cols[a]}} h_tilde[b]
    m = len(cols)
    return sp.Matrix(m, m, lambda a, b: lie(E.g[cols[a]], h_tilde[b], E.state))


class _Directions:
    """Lie derivatives along the drift, known-input and unknown-input
    directions corrected by the reconstructed unknown inputs."""

    def __init__(self, E: Model, h_tilde, cols, nu):
        self.E, self.cols, self.nu = E, list(cols), nu
        m = len(cols)
        st = E.state

        def coeffs(deriv):
            d = [deriv(h) for h in h_tilde]
            return [simplify(sum((nu[i, l] * d[i] for i in range(m)), sp.S.Zero)) for l in range(m)]

        self.c0 = coeffs(lambda h: lie_dot_drift(E, h))
        self.cf = [coeffs(lambda h, f=f: lie(f, h, st)) for f in E.f]
        self.others = [j for j in range(E.m_w) if j not in cols]
        self.cg = {j: coeffs(lambda h, j=j: lie(E.g[j], h, st)) for j in self.others}

    def derivatives(self, gamma: Expr) -> list[Expr]:
        E, st, m = self.E, self.E.state, len(self.cols)
        piv = [lie(E.g[c], gamma, st, False) for c in self.cols]

        def corrected(base, c):
            return base - sum((c[l] * piv[l] for l in range(m)), sp.S.Zero)

        out = [corrected(lie_dot_drift(E, gamma, False), self.c0)]
        out += [corrected(lie(f, gamma, st, False), c) for f, c in zip(E.f, self.cf)]
        out += [sum((self.nu[i, l] * piv[l] for l in range(m)), sp.S.Zero) for i in range(m)]
        out += [corrected(lie(E.g[j], gamma, st, False), self.cg[j]) for j in self.others]
        return out


def _normalize_candidate(e: Expr) -> Expr:
    e = sp.sympify(e)
    try:
        return sp.cancel(sp.together(e))
    except (sp.PolynomialError, TypeError):
        return simplify(e)


def _closure(E: Model, opts: UioOptions) -> _Closure:
    sampler = opts.sampler(E.positive)
    cloud = PointCloud(_cloud_symbols(E), sampler, opts.trials)
    tracker = RankTracker(E.state, cloud, opts.rtol)
    funcs = []
    for h in E.outputs:
        up, g = tracker.raises(h)
        if up:
            funcs.append(sp.sympify(h))
            tracker.add(g)
    frontier = list(funcs)
    prev_rows = None
    certified = False
    depth = 0
    rows, cols, nu = [], [], None
    for depth in range(1, opts.depth + 1):
        rows, cols = _select_pivots(E, funcs, cloud, opts.rtol)
        ht = [funcs[i] for i in rows]
        nu = symbolic_inverse(_mu(E, ht, cols)) if rows else sp.zeros(0, 0)
        dirs = _Directions(E, ht, cols, nu)
        # a new h_tilde changes every corrected direction: revisit all functions
        targets = funcs if (rows, cols) != prev_rows else frontier
        prev_rows = (rows, cols)
        new = []
        for gamma in list(targets):
            if tracker.rank >= E.n:
                break
            for cand in dirs.derivatives(gamma):
                cand = _normalize_candidate(cand)
                if cand.is_number:
                    continue
                up, g = tracker.raises(cand)
                if up:
                    funcs.append(cand)
                    tracker.add(g)
                    new.append(cand)
        if not new:
            certified = True
            break
        frontier = new
    if certified or tracker.rank >= E.n:
        rows, cols = _select_pivots(E, funcs, cloud, opts.rtol)
        ht = [funcs[i] for i in rows]
        nu = symbolic_inverse(_mu(E, ht, cols)) if rows else sp.zeros(0, 0)
        certified = True
    return _Closure(funcs, len(rows), rows, cols, nu, certified, depth, tracker)


def _recombine(E: Model, cl: _Closure, rec: ExtensionRecord) -> tuple[Model, ExtensionRecord]:
    """Put the pivot unknown inputs first and remove their directions from
    the others, so that the last m_w - m fields annihilate every h_tilde.

    With g^j = sum_l c_jl g^{p_l} + ghat^j on the h_tilde rows, the input
    sum becomes sum_l g^{p_l} (w_{p_l} + sum_j c_jl w_j) + sum_j ghat^j w_j.
    """
    cols, m = cl.cols, cl.m
    others = [j for j in range(E.m_w) if j not in cols]
    ht = cl.h_tilde
    nu = cl.nu
    st = E.state
    c = {}
    for j in others:
        d = [lie(E.g[j], h, st) for h in ht]
        for l in range(m):
            c[j, l] = simplify(sum((nu[i, l] * d[i] for i in range(m)), sp.S.Zero))
    ui_map = dict(rec.ui_map) if rec.ui_map else {w.name: w for w in E.unknown_inputs}
    new_w, new_g = [], []
    for l, p in enumerate(cols):
        wl = E.unknown_inputs[p]
        nonzero = [j for j in others if not is_zero(c[j, l])]
        expr = ui_map.get(wl.name, wl) + sum((c[j, l] * ui_map.get(E.unknown_inputs[j].name, E.unknown_inputs[j]) for j in nonzero), sp.S.Zero)
        name = wl.name if not nonzero else f"{wl.name}_tilde"
        new_w.append(sp.Symbol(name))
        new_g.append(E.g[p])
        ui_map[name] = expr
        if name != wl.name:
            ui_map.pop(wl.name, None)
    for j in others:
        wj = E.unknown_inputs[j]
        gh = tuple(
            simplify(E.g[j][i] - sum((c[j, l] * E.g[cols[l]][i] for l in range(m)), sp.S.Zero)) for i in range(E.n)
        )
        new_w.append(wj)
        new_g.append(gh)
    E2 = replace(E, unknown_inputs=tuple(new_w), g=tuple(new_g))
    order = tuple(w.name for w in new_w)
    return E2, ExtensionRecord(dict(rec.orders), ui_map, order)


def _assemble(m0, E, rec, cl: _Closure, opts, override=False) -> UioResult:
    funcs = cl.funcs
    O = tuple(differential(f, E.state, f"d{_label(i, f, E, cl)}") for i, f in enumerate(funcs))
    if not rec.ui_map:
        rec = ExtensionRecord(dict(rec.orders), {w.name: w for w in E.unknown_inputs}, tuple(w.name for w in E.unknown_inputs))
    r = generic_rank(sp.Matrix([list(c.components) for c in O]), opts.sampler(E.positive, 1), opts.trials, opts.rtol)
    return UioResult(
        model=E,
        original=m0,
        extension=rec,
        m=cl.m,
        h_tilde=tuple(cl.h_tilde),
        functions=tuple(funcs),
        O=O,
        rank=r.rank,
        canonic=cl.m == E.m_w,
        observable=r.rank == E.n,
        certified=cl.certified,
        override=override,
        witness=r.witness,
        depth_used=cl.depth,
        options=opts,
    )


def _label(i, f, E, cl):
    if i in cl.rows:
        return f"h~{cl.rows.index(i) + 1}"
    for k, h in enumerate(E.outputs):
        if sp.sympify(h) == f:
            return E.output_names[k]
    return f"gamma{i + 1}"


def build_uio(m0: Model, opts: UioOptions | None = None) -> UioResult:
    opts = opts or UioOptions()
    if m0.override is not None:
        return _adopt_override(m0, opts)
    E, rec = m0, ExtensionRecord()
    cl = _closure(E, opts)
    while cl.m < E.m_w and cl.certified:
        accepted = False
        for J in range(1, opts.max_order + 1):
            for w in E.unknown_inputs:
                E2, r2 = uie_extend(E, {w.name: J})
                cl2 = _closure(E2, opts)
                if cl2.m > cl.m and cl2.certified:
                    log.info("absorbing %s (order %d) raises the degree to %d", w.name, J, cl2.m)
                    E, rec, cl = E2, rec.merged(r2), cl2
                    accepted = True
                    break
            if accepted:
                break
        if not accepted:
            break
    if cl.m < E.m_w:
        E, rec = _recombine(E, cl, rec)
        cl = _closure(E, opts)
    return _assemble(m0, E, rec, cl, opts)


def _override_orders(m0: Model) -> dict:
    orders = {}
    names = {w.name for w in m0.unknown_inputs}
    for e in m0.override:
        for s in sp.sympify(e).free_symbols:
            base, k = split_derivative(s.name)
            if base in names:
                orders[base] = max(orders.get(base, 0), k + 1)
    return orders


def _adopt_override(m0: Model, opts: UioOptions) -> UioResult:
    orders = _override_orders(m0)
    E, rec = uie_extend(m0, orders) if orders else (m0, ExtensionRecord())
    allowed = set(E.state) | {TIME}
    funcs = [sp.sympify(e) for e in m0.override]
    for e in funcs:
        bad = e.free_symbols - allowed
        if bad:
            raise OverrideInvalid(f"override generator {to_text(e)} uses {', '.join(sorted(s.name for s in bad))}")
    sampler = opts.sampler(E.positive)
    cloud = PointCloud(_cloud_symbols(E), sampler, opts.trials)
    tracker = RankTracker(E.state, cloud, opts.rtol)
    for e in funcs:
        up, g = tracker.raises(e)
        if not up:
            raise OverrideInvalid(f"override generator {to_text(e)} is dependent on the previous ones")
        tracker.add(g)
    for h in E.outputs:
        up, _ = tracker.raises(h)
        if up:
            raise OverrideInvalid(f"output {to_text(h)} is not in the span of the override generators")
    rows, cols = _select_pivots(E, funcs, cloud, opts.rtol)
    ht = [funcs[i] for i in rows]
    nu = symbolic_inverse(_mu(E, ht, cols)) if rows else sp.zeros(0, 0)
    cl = _Closure(funcs, len(rows), rows, cols, nu, True, 0, tracker)
    if cl.m < E.m_w:
        E, rec = _recombine(E, cl, rec)
        rows, cols = _select_pivots(E, funcs, cloud, opts.rtol)
        cl = _Closure(funcs, len(rows), rows, cols, symbolic_inverse(_mu(E, [funcs[i] for i in rows], cols)), True, 0, tracker)
    return _assemble(m0, E, rec, cl, opts, override=True)


# --------------------------------------------------------------------------
# membership and the theta-state codistribution


def membership(
    cov: CovectorField | Sequence[Expr],
    O: Sequence[CovectorField],
    sampler: Sampler | None = None,
    trials: int = DEFAULT_TRIALS,
    rtol: float = RANK_RTOL,
) -> bool:
    """True iff appending ``cov`` does not raise the generic rank of ``O``."""
    comps = list(cov.components if isinstance(cov, CovectorField) else cov)
    if O and len(comps) != len(O[0]):
        raise ValueError("covector dimension does not match the codistribution")
    if all(sp.sympify(c) == 0 for c in comps):
        return True
    base = sp.Matrix([list(c.components) for c in O]) if O else sp.zeros(0, len(comps))
    r0 = generic_rank(base, sampler, trials, rtol).rank
    r1 = generic_rank(base.col_join(sp.Matrix([comps])), sampler, trials, rtol).rank
    return r1 == r0


def unit_covector(i: int, n: int, label: str = "") -> CovectorField:
    return CovectorField(tuple(sp.S.One if k == i else sp.S.Zero for k in range(n)), label)


@dataclass(frozen=True)
class ThetaCodistribution:
    symbols: tuple  # [state of E, unknown inputs of E]
    generators: tuple
    functions: tuple
    rank: int
    n_o: int
    m: int

    def index(self, name: str) -> int:
        return [s.name for s in self.symbols].index(name)


def build_theta_codistribution(u: UioResult, trials: int | None = None) -> ThetaCodistribution:
    """Generators dgamma_1..dgamma_{n_o} and dL_{G0} h~_i over [x; w]."""
    if not u.certified:
        raise DepthExhausted("theta codistribution needs a certified closure")
    E = u.model
    S = tuple(E.state) + tuple(E.unknown_inputs)
    drift = E.rhs()
    fns = list(u.functions)
    for h in u.h_tilde:
        # derivative along the full right-hand side; known inputs stay as symbols
        e = sum((sp.diff(h, x) * d for x, d in zip(E.state, drift)), sp.S.Zero) + sp.diff(h, TIME)
        fns.append(simplify(e))
    gens = tuple(differential(f, S, f"d{k}") for k, f in enumerate(fns))
    positive = set(E.positive)
    sampler = Sampler(np.random.default_rng(u.options.seed + 7), u.options.box, frozenset(positive))
    r = generic_rank(sp.Matrix([list(c.components) for c in gens]), sampler, trials or u.options.trials, u.options.rtol)
    expected = len(u.functions) + u.m
    if r.rank != expected:
        raise ExprError(f"theta codistribution has rank {r.rank}, expected {expected}")
    return ThetaCodistribution(S, gens, tuple(fns), r.rank, len(u.functions), u.m)


def theta_membership(th: ThetaCodistribution, name: str, sampler: Sampler | None = None, trials: int = DEFAULT_TRIALS) -> bool:
    i = th.index(name)
    return membership(unit_covector(i, len(th.symbols)), list(th.generators), sampler, trials)


def non_canonic_residuals(u: UioResult) -> list[tuple[str, str, Expr]]:
    """L_{g^{m+j}} gamma for every observable gamma and excess field;
    all of them vanish when the closure is consistent."""
    E = u.model
    out = []
    for j in range(u.m, E.m_w):
        for f in u.functions:
            out.append((E.unknown_inputs[j].name, to_text(f), lie(E.g[j], f, E.state)))
    return out


def uio_record(u: UioResult) -> dict:
    """JSON-ready summary."""
    E = u.model
    return {
        "system": E.name,
        "state": [s.name for s in E.state],
        "unknown_inputs": [w.name for w in E.unknown_inputs],
        "extension": {k: u.extension.orders[k] for k in sorted(u.extension.orders)},
        "unknown_input_map": {k: to_text(v) for k, v in u.extension.ui_map.items()},
        "m": u.m,
        "h_tilde": [to_text(h) for h in u.h_tilde],
        "generators": [to_text(f) for f in u.functions],
        "rank": u.rank,
        "dimension": E.n,
        "canonic": u.canonic,
        "observable": u.observable,
        "certified": u.certified,
        "override_adopted": u.override,
        "closure_depth": u.depth_used,
        "witness": {k: u.witness[k] for k in sorted(u.witness)},
    }
