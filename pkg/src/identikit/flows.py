"""One-parameter families of indistinguishable states and unknown inputs.

For a field xi of the orthogonal distribution, every time instant t of a base
trajectory is flowed in the auxiliary parameter tau:

    dx'/dtau = xi(x'),    dw'/dtau = chi(x', w'),    x'(t, 0) = x(t), w'(t, 0) = w(t)

with chi_j = -sum_i nu^i_j (xi^0_i + sum_k xi^k_i w_k). Excess unknown inputs
of a non-canonic system get the shift family w_j + tau instead.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import sympy as sp
from scipy.integrate import solve_ivp

from .codistribution import UioResult
from .diffgeo import RANK_RTOL, VectorField, lie, lie_dot_drift
from .expr import TAU, TIME, Expr, ExprError, is_zero, simplify, to_text
from .identifiability import MuNu, mu_nu, xi_coefficients
from .simverify import ATOL, RTOL, ProbeResult, Trajectory, minimal_info_probe, vector_function

BLOWUP = 1e12


class FlowError(ExprError):
    pass


@dataclass
class FamilySolution:
    tau_grid: np.ndarray  # (K,)
    time_grid: np.ndarray  # (T,)
    x_prime: np.ndarray  # (T, K, n)
    w_prime: np.ndarray  # (T, K, m_w)
    state_names: tuple
    input_names: tuple
    provenance: str = "numeric-flow"
    generator: str = ""
    valid: np.ndarray | None = None  # (T, K) bool

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.isfinite(self.x_prime).all(axis=2) & np.isfinite(self.w_prime).all(axis=2)

    def tau_index(self, tau: float) -> int:
        k = int(np.argmin(np.abs(self.tau_grid - tau)))
        if abs(self.tau_grid[k] - tau) > 1e-12:
            raise KeyError(f"tau={tau} is not on the grid")
        return k

    def column(self, name: str, tau: float) -> np.ndarray:
        k = self.tau_index(tau)
        if name in self.state_names:
            return self.x_prime[:, k, self.state_names.index(name)]
        return self.w_prime[:, k, self.input_names.index(name)]

    def truncation(self) -> list:
        """Per time instant, the (lowest, highest) grid tau that was reached."""
        out = []
        for row in self.valid:
            taus = self.tau_grid[row]
            out.append((float(taus.min()), float(taus.max())) if taus.size else (None, None))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "tau", *self.state_names, *self.input_names])
        for i, t in enumerate(self.time_grid):
            for k, tau in enumerate(self.tau_grid):
                vals = [*self.x_prime[i, k], *self.w_prime[i, k]]
                wr.writerow([repr(float(t)), repr(float(tau)), *[repr(float(v)) for v in vals]])
        return buf.getvalue()

    def record(self) -> dict:
        def arr(a):
            return [[[None if not np.isfinite(v) else float(v) for v in row] for row in plane] for plane in a]

        return {
            "provenance": self.provenance,
            "generator": self.generator,
            "tau_grid": [float(t) for t in self.tau_grid],
            "time_grid": [float(t) for t in self.time_grid],
            "state_names": list(self.state_names),
            "input_names": list(self.input_names),
            "x_prime": arr(self.x_prime),
            "w_prime": arr(self.w_prime),
            "valid": [[bool(v) for v in row] for row in self.valid],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FamilySolution":
        def arr(a):
            return np.array([[[np.nan if v is None else v for v in row] for row in plane] for plane in a], dtype=float)

        n, m = len(rec["state_names"]), len(rec["input_names"])
        T, K = len(rec["time_grid"]), len(rec["tau_grid"])
        return cls(
            np.array(rec["tau_grid"], dtype=float),
            np.array(rec["time_grid"], dtype=float),
            arr(rec["x_prime"]).reshape(T, K, n),
            arr(rec["w_prime"]).reshape(T, K, m),
            tuple(rec["state_names"]),
            tuple(rec["input_names"]),
            rec.get("provenance", "numeric-flow"),
            rec.get("generator", ""),
            np.array(rec["valid"], dtype=bool).reshape(T, K),
        )

    def to_json(self) -> str:
        return json.dumps(self.record(), sort_keys=True, indent=1)


# --------------------------------------------------------------------------
# chi and the flow field


def chi(u: UioResult, xi: VectorField | Sequence, mn: MuNu | None = None) -> list[Expr]:
    """chi_j over the state, the first m unknown inputs and (if they enter)
    the known inputs."""
    if u.m == 0:
        return []
    mn = mn or mu_nu(u)
    xc = xi_coefficients(u, xi)
    E = u.model
    w = E.unknown_inputs[: u.m]
    out = []
    for j in range(u.m):
        acc = sp.S.Zero
        for i in range(u.m):
            inner = xc[0][i] + sum((xc[k + 1][i] * w[k] for k in range(u.m)), sp.S.Zero)
            inner += sum((xc[uk.name][i] * uk for uk in E.known_inputs), sp.S.Zero)
            acc += mn.nu[i, j] * inner
        out.append(simplify(-acc))
    return out


def combine(basis: Sequence[VectorField], coeffs: Sequence[float]) -> VectorField:
    if len(coeffs) != len(basis):
        raise ValueError(f"{len(coeffs)} coefficients for {len(basis)} generators")
    n = len(basis[0])
    comps = tuple(simplify(sum((sp.nsimplify(c) * b[i] for c, b in zip(coeffs, basis)), sp.S.Zero)) for i in range(n))
    return VectorField(comps, "+".join(f"{c}*{b.label}" for c, b in zip(coeffs, basis)))


class FlowField:
    """Right-hand side of the tau-system, vectorized over time instants.

    In ``symbolic`` mode xi and chi are compiled expressions. In ``numeric``
    mode xi is taken from the numeric null space of the codistribution at the
    current point and chi is assembled from numerically evaluated gradients;
    no symbolic null space is needed.

    A pointwise null-space vector is only defined up to a state-dependent
    factor, and such factors change which member each time instant lands on.
    The numeric field is therefore pinned: its components on ``d`` chosen
    coordinates, either plain (xi_j) or logarithmic (xi_j / x_j), are held
    at fixed values. Without a base trajectory the
    coordinates are taken constant parameters first, then in state order.
    With one, ``select_pins`` scores every admissible choice by how well the
    pinned field satisfies the linearized dynamics along the trajectory and
    keeps the best; the resulting family should still be checked with
    ``verify_family``.
    """

    def __init__(self, u: UioResult, xi: VectorField | None = None, mode: str = "symbolic",
                 reference: Sequence[float] | None = None, seed: int = 0):
        E = u.model
        self.u, self.E, self.mode, self.seed = u, E, mode, seed
        self.n, self.m = E.n, u.m
        self.args = list(E.state) + list(E.unknown_inputs[: u.m]) + list(E.known_inputs) + [TIME]
        if mode == "symbolic":
            if xi is None:
                raise ValueError("symbolic mode needs a field")
            self._xi = vector_function(xi.components, self.args)
            self._chi = vector_function(chi(u, xi), self.args) if u.m else None
        elif mode == "numeric":
            st = list(E.state)
            self._jac = vector_function([sp.diff(f, x) for f in u.functions for x in st], self.args)
            self.k = len(u.functions)
            h = u.h_tilde
            rows = [lie_dot_drift(E, hi) for hi in h]
            rows += [lie(E.g[a], hi, st) for a in range(u.m) for hi in h]
            rows += [lie(f, hi, st) for f in E.f for hi in h]
            self._grads = vector_function([sp.diff(r, x) for r in rows for x in st], self.args)
            self._mu = vector_function([lie(E.g[i], h[j], st) for i in range(u.m) for j in range(u.m)], self.args)
            rng = np.random.default_rng(seed)
            self.reference = np.asarray(reference, dtype=float) if reference is not None else rng.normal(size=self.n)
            self.pins = None  # (coordinates, log flags, values)
            consts = set(E.constants)
            self._order = [i for i, x in enumerate(st) if x in consts] + [i for i, x in enumerate(st) if x not in consts]
            rhs = E.rhs()
            self._rhs_args = st + list(E.unknown_inputs) + list(E.known_inputs) + [TIME]
            self._A = vector_function([sp.diff(r, x) for r in rhs for x in st], self._rhs_args)
            self._G = vector_function([gj[i] for gj in E.g[: u.m] for i in range(self.n)], self._rhs_args)
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def _null_at(self, args, D, d):
        T = D.shape[0]
        J = self._jac(*args).reshape(self.k, self.n, T).transpose(2, 0, 1)  # (T, k, n)
        _, s, vt = np.linalg.svd(J * D[:, None, :])
        N = vt[:, self.n - d:, :] * D[:, None, :]  # (T, d, n) in the original coordinates
        r = self.n - d
        singular = s[:, r - 1] <= RANK_RTOL * s[:, 0] if r > 0 else np.zeros(T, dtype=bool)
        return N, singular

    def _null(self, args):
        """Null-space bases (T, d, n) of the codistribution with d = n - rank.

        Columns are scaled by the state magnitudes before the SVD. Where the
        codistribution loses rank the basis is taken at a nearby generic
        point, relying on continuity of the field.
        """
        T = args[0].shape[0] if np.ndim(args[0]) else 1
        args = [np.broadcast_to(np.asarray(a, dtype=float), (T,)) for a in args]
        X = np.abs(np.vstack(args[: self.n]).T)
        D = np.where(X > 0, X, 1.0)
        d = self.n - self.u.rank
        N, singular = self._null_at(args, D, d)
        if singular.any():
            idx = np.where(singular)[0]
            rng = np.random.default_rng(self.seed)
            sub = [a[idx].copy() for a in args]
            for j in range(self.n):
                sub[j] = sub[j] + 1e-7 * D[idx, j] * rng.uniform(0.5, 1.0, idx.size)
            N[idx] = self._null_at(sub, D[idx], d)[0]
        return N

    def pin(self, Y: np.ndarray, t: float, U: np.ndarray) -> None:
        """Choose the pinned coordinates and values at one point."""
        if self.mode != "numeric":
            return
        args = [*np.atleast_2d(Y).T, *np.atleast_2d(U).T, np.atleast_1d(t)]
        N = self._null(args)[0]
        d = N.shape[0]
        scale = np.abs(N).max(axis=1, keepdims=True)
        Nn = N / np.where(scale > 0, scale, 1.0)
        cols = []
        for j in self._order:
            if len(cols) == d:
                break
            if np.linalg.matrix_rank(Nn[:, cols + [j]], tol=1e-8) > len(cols):
                cols.append(j)
        logs = [False] * len(cols)
        self.pins = (cols, logs, self._pin_values(N, np.atleast_1d(Y)[: self.n], cols, logs))

    def _pin_values(self, N, x, cols, logs):
        q = np.linalg.qr(N.T)[0]
        v = (q @ (q.T @ self.reference))[list(cols)]
        return np.array([vi / x[c] if lg else vi for vi, c, lg in zip(v, cols, logs)])

    def _candidates(self, d, X):
        """(cols, logs) choices; log pins only where the coordinate keeps its sign."""
        from itertools import combinations, product

        keeps = [bool((X[:, j] > 0).all() or (X[:, j] < 0).all()) for j in range(self.n)]
        for cols in combinations(self._order, d):
            opts = [(False, True) if keeps[c] else (False,) for c in cols]
            for logs in product(*opts):
                yield list(cols), list(logs)

    def select_pins(self, base: Trajectory, samples: int = 40, max_candidates: int = 400) -> float:
        """Pick pinned coordinates from the linearized dynamics along ``base``.

        A generator of indistinguishable states carries solutions to
        solutions, so along the base trajectory d/dt xi = A xi + G chi with A
        the state Jacobian of the right-hand side and G the unknown-input
        fields. Returns the relative residual of the chosen pins.
        """
        if self.mode != "numeric":
            return 0.0
        n, m = self.n, self.m
        d = n - self.u.rank
        t = base.time_grid
        if d == 0 or t.size < 3:
            self.pins = None
            return 0.0
        mid = np.unique(np.linspace(1, t.size - 2, min(samples, t.size - 2)).round().astype(int))
        pts = np.concatenate([mid - 1, mid, mid + 1])
        Y = np.hstack([base.state, base.w[:, :m]])[pts]
        U = base.u[pts]
        tt = t[pts]
        args = [*Y.T, *U.T, tt]
        N = self._null(args)
        N0 = self._null([*np.hstack([base.state, base.w[:, :m]])[:1].T, *base.u[:1].T, t[:1]])[0]
        k = mid.size
        rargs = [*base.state[mid].T, *base.w[mid].T, *base.u[mid].T, t[mid]]
        A = self._A(*rargs).reshape(n, n, k).transpose(2, 0, 1)
        G = self._G(*rargs).reshape(m, n, k).transpose(2, 1, 0) if m else np.zeros((k, n, 0))
        scale = np.abs(base.state).max(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        dt = (t[mid + 1] - t[mid - 1])[:, None]
        scored = []
        from itertools import islice

        x0 = base.state[0]
        for cols, logs in islice(self._candidates(d, base.state), max_candidates):
            sub = N[:, :, cols]
            if (np.linalg.cond(sub) > 1e10).any() or np.linalg.cond(N0[:, cols]) > 1e10:
                continue
            self.pins = (cols, logs, self._pin_values(N0, x0, cols, logs))
            F = self(Y, tt, U)  # (3k, n + m)
            xi_l, xi_c, xi_r = F[:k, :n], F[k:2 * k, :n], F[2 * k:, :n]
            dxi = (xi_r - xi_l) / dt
            lin = np.einsum("kij,kj->ki", A, xi_c) + np.einsum("kij,kj->ki", G, F[k:2 * k, n:])
            num = np.linalg.norm((dxi - lin) / scale, axis=1)
            den = np.linalg.norm(dxi / scale, axis=1) + np.linalg.norm(lin / scale, axis=1) + 1e-300
            with np.errstate(all="ignore"):
                score = float(np.nanmedian(num / den))
            scored.append((score if np.isfinite(score) else np.inf, cols, logs))
        if not scored:
            raise FlowError("no admissible pinned coordinates along the base trajectory")
        best = min(sc[0] for sc in scored)
        score, cols, logs = next(sc for sc in scored if sc[0] <= max(10 * best, 1e-6))
        self.pins = (cols, logs, self._pin_values(N0, x0, cols, logs))
        return score

    def _numeric_xi(self, args):
        if self.pins is None:
            first = [np.atleast_1d(a)[0] for a in args]
            self.pin(np.array(first[: self.n + self.m]), first[-1], np.array(first[self.n + self.m: -1]))
        cols, logs, vals = self.pins
        N = self._null(args)  # (T, d, n)
        T = N.shape[0]
        if not cols:
            return np.zeros((self.n, T))
        wts = np.ones((T, len(cols)))
        for k, (c, lg) in enumerate(zip(cols, logs)):
            if lg:
                wts[:, k] = 1.0 / np.broadcast_to(np.asarray(args[c], float), (T,))
        rhs = np.broadcast_to(np.asarray(vals, float)[:, None], (T, len(cols), 1))
        M = N[:, :, cols] * wts[:, None, :]
        A = np.linalg.solve(M.transpose(0, 2, 1), rhs)[..., 0]  # (T, d)
        return np.einsum("Td,Tdn->nT", A, N)  # (n, T)

    def __call__(self, Y: np.ndarray, t: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Y (T, n+m), t (T,), U (T, m_u) -> dY/dtau (T, n+m)."""
        args = [*Y.T, *U.T, t]
        if self.mode == "symbolic":
            dx = self._xi(*args)
            dw = self._chi(*args) if self.m else np.zeros((0, Y.shape[0]))
            return np.vstack([dx, dw]).T
        xi = self._numeric_xi(args)  # (n, T)
        T = Y.shape[0]
        m, n = self.m, self.n
        G = self._grads(*args).reshape(-1, n, T)  # rows grouped by alpha then i
        coef = np.einsum("rnT,nT->rT", G, xi)  # (rows, T)
        c0 = coef[:m]
        ca = coef[m: m + m * m].reshape(m, m, T)  # [alpha, i]
        cu = coef[m + m * m:].reshape(-1, m, T)  # [k, i]
        W = Y[:, n:].T  # (m, T)
        inner = c0 + np.einsum("aiT,aT->iT", ca, W)
        if cu.shape[0]:
            inner = inner + np.einsum("kiT,kT->iT", cu, U.T)
        mu = self._mu(*args).reshape(m, m, T).transpose(2, 0, 1)
        nu = np.linalg.inv(mu)  # (T, m, m), nu[T, i, j]
        dw = -np.einsum("Tij,iT->jT", nu, inner)
        return np.vstack([xi, dw]).T


def _positive_mask(u: UioResult) -> np.ndarray:
    E = u.model
    syms = list(E.state) + list(E.unknown_inputs[: u.m])
    return np.array([s in E.positive for s in syms], dtype=bool)


def _flow_direction(field: FlowField, Y0, t, U, taus, pos_mask, rtol, atol):
    """Integrate from tau=0 through the grid ``taus`` (one sign, sorted by
    |tau|); ``pos_mask`` (T, d) marks entries that must stay positive.
    Returns (values (len(taus), T, d), reached mask (len(taus),))."""
    T, d = Y0.shape
    out = np.full((len(taus), T, d), np.nan)
    reached = np.zeros(len(taus), dtype=bool)
    if not len(taus):
        return out, reached
    end = taus[-1]

    def f(tau, y):
        return field(y.reshape(T, d), t, U).reshape(-1)

    events = []
    if pos_mask.any():
        def positivity(tau, y):
            Y = y.reshape(T, d)
            return float(np.min(Y[pos_mask])) - DOMAIN_EPS

        positivity.terminal = True
        events.append(positivity)

    def blowup(tau, y):
        return BLOWUP - float(np.max(np.abs(y)))

    blowup.terminal = True
    events.append(blowup)
    with np.errstate(all="ignore"):
        sol = solve_ivp(f, (0.0, end), Y0.reshape(-1), method="RK45", t_eval=taus, rtol=rtol, atol=atol, events=events)
    # scipy leaves sol.t as an empty list when no grid point was reached
    k = len(sol.t)
    if k:
        out[:k] = np.asarray(sol.y).T.reshape(k, T, d)
        reached[:k] = np.isfinite(out[:k]).all(axis=(1, 2))
    return out, reached


DOMAIN_EPS = -1e-9


def integrate_family(
    u: UioResult,
    xi: VectorField | None,
    base: Trajectory,
    tau_grid: Sequence[float],
    mode: str = "symbolic",
    rtol: float = RTOL,
    atol: float = ATOL,
    police_domain: bool = True,
    reference=None,
) -> FamilySolution:
    """Flow every time instant of ``base`` along xi for each tau on the grid."""
    taus = np.array(sorted(set(float(t) for t in tau_grid)))
    if taus.size == 0:
        raise ValueError("empty tau grid")
    if not np.any(taus == 0.0):
        raise ValueError("tau grid must contain 0")
    E = u.model
    field_ = FlowField(u, xi, mode, reference, u.options.seed)
    t = base.time_grid
    T = t.size
    Y0 = np.hstack([base.state, base.w[:, : u.m]])
    field_.select_pins(base)
    pos = _positive_mask(u) if police_domain else np.zeros(Y0.shape[1], dtype=bool)
    # entries that start on the boundary of the positive region are not policed
    pos = pos[None, :] & (Y0 > 0)
    res = np.full((T, taus.size, Y0.shape[1]), np.nan)
    i0 = int(np.where(taus == 0.0)[0][0])
    res[:, i0] = Y0
    for sign in (1, -1):
        idx = [i for i in range(taus.size) if np.sign(taus[i]) == sign]
        idx.sort(key=lambda i: abs(taus[i]))
        if not idx:
            continue
        sub = taus[idx]
        vals, reached = _flow_direction(field_, Y0, t, base.u, sub, pos, rtol, atol)
        for j, i in enumerate(idx):
            res[:, i] = vals[j]
        if not reached.all():
            # a shared stop: continue each time instant on its own
            for ti in range(T):
                v, r = _flow_direction(field_, Y0[ti: ti + 1], t[ti: ti + 1], base.u[ti: ti + 1], sub,
                                       pos[ti: ti + 1], rtol, atol)
                for j, i in enumerate(idx):
                    res[ti, i] = v[j, 0] if r[j] else np.nan
    n = E.n
    W = np.repeat(base.w[:, None, :], taus.size, axis=1).astype(float)
    W[:, :, : u.m] = res[:, :, n:]
    X = res[:, :, :n]
    bad = ~np.isfinite(X).all(axis=2)
    W[bad] = np.nan
    label = xi.label if xi is not None else "numeric"
    return FamilySolution(taus, t.copy(), X, W, tuple(s.name for s in E.state),
                          tuple(w.name for w in E.unknown_inputs), f"numeric-flow/{mode}", label)


def flow_point(u: UioResult, xi: VectorField | None, x: Sequence[float], w: Sequence[float], t: float,
               tau: float, u_val: Sequence[float] = (), mode: str = "symbolic",
               rtol: float = RTOL, atol: float = ATOL, reference=None) -> np.ndarray:
    """State and first-m unknown inputs after flowing one point by ``tau``."""
    Y0 = np.concatenate([np.asarray(x, float), np.asarray(w, float)[: u.m]])[None, :]
    if tau == 0:
        return Y0[0].copy()
    field_ = FlowField(u, xi, mode, reference, u.options.seed)
    U = np.asarray(u_val, float).reshape(1, -1)
    vals, reached = _flow_direction(field_, Y0, np.array([t]), U, np.array([tau]),
                                    np.zeros(Y0.shape, dtype=bool), rtol, atol)
    if not reached[0]:
        raise FlowError(f"flow did not reach tau={tau}")
    return vals[0, 0]


def probe_family(u: UioResult, xi: VectorField | None, base: Trajectory, extra_output, t_star: float,
                 measurement: float, tau_range: tuple[float, float], samples: int = 201,
                 mode: str = "symbolic") -> ProbeResult:
    """Recover the family parameter from one extra measurement at ``t_star``.

    ``t_star`` must lie on the base time grid; the member at each candidate
    tau is obtained by flowing the base point at ``t_star``.
    """
    i = int(np.argmin(np.abs(base.time_grid - t_star)))
    if abs(base.time_grid[i] - t_star) > 1e-9 * max(1.0, abs(t_star)):
        raise ValueError(f"t*={t_star} is not on the time grid")
    E = u.model
    field_ = FlowField(u, xi, mode, None, u.options.seed)
    field_.select_pins(base)
    Y0 = np.concatenate([base.state[i], base.w[i, : u.m]])[None, :]
    t, U = base.time_grid[i: i + 1], base.u[i: i + 1]
    names = [s.name for s in E.state] + [w.name for w in E.unknown_inputs[: u.m]]
    off = np.zeros(Y0.shape, dtype=bool)

    def point_at(tau):
        if tau == 0:
            vals = Y0[0]
        else:
            v, ok = _flow_direction(field_, Y0, t, U, np.array([tau]), off, RTOL, ATOL)
            vals = v[0, 0] if ok[0] else np.full(Y0.shape[1], np.nan)
        return dict(zip(names, vals))

    return minimal_info_probe(point_at, extra_output, measurement, tau_range, samples)


def shift_family(u: UioResult, j: int, tau_grid: Sequence[float], base: Trajectory) -> FamilySolution:
    """w_j + tau for an excess unknown input (j is 1-based, j > m)."""
    E = u.model
    if not u.m < j <= E.m_w:
        raise ValueError(f"shift family applies to inputs {u.m + 1}..{E.m_w}, got {j}")
    taus = np.array(sorted(set(float(t) for t in tau_grid)))
    X = np.repeat(base.state[:, None, :], taus.size, axis=1).astype(float)
    W = np.repeat(base.w[:, None, :], taus.size, axis=1).astype(float)
    W[:, :, j - 1] += taus[None, :]
    return FamilySolution(taus, base.time_grid.copy(), X, W, tuple(s.name for s in E.state),
                          tuple(w.name for w in E.unknown_inputs), "shift", f"shift {E.unknown_inputs[j - 1].name}")


def default_generator(u: UioResult, basis: Sequence[VectorField]) -> int:
    """Index of the first basis field that violates the condition for some
    unknown input, else 0."""
    if not basis or u.m == 0:
        return 0
    from .identifiability import check_tv

    mn = mu_nu(u)
    for k, xi in enumerate(basis):
        for j in range(1, u.m + 1):
            if not check_tv(u, j, [xi], mn).identifiable:
                return k
    return 0


# --------------------------------------------------------------------------
# closed forms


@dataclass(frozen=True)
class ClosedFormFamily:
    model: str
    generator: int  # 1-based index of the basis field the family flows along
    components: dict = field(default_factory=dict)  # name -> Expr in base symbols and tau

    def at_zero_is_identity(self) -> bool:
        return all(is_zero(e.subs(TAU, 0) - sp.Symbol(k)) for k, e in self.components.items())


def _s(names):
    return sp.symbols(names)


def _hiv():
    T_U, T_I, V, lam, rho, delta, N, c, eta = _s("T_U T_I V lambda rho delta N c eta")
    t = TAU
    q = delta * sp.exp(-rho * t) + rho - delta
    eta_p = (eta * T_U * V * rho * sp.exp(rho * t) + (T_I * delta ** 2 - T_I * delta * rho - eta * T_U * V * delta)
             * (sp.exp(rho * t) - 1)) / (V * (T_I * delta + T_U * rho) * sp.exp(rho * t) - V * T_I * delta)
    return ClosedFormFamily("hiv", 1, {
        "T_U": T_U + T_I - T_I / rho * q,
        "T_I": T_I / rho * q,
        "V": V,
        "lambda": lam,
        "rho": rho,
        "delta": delta * rho / ((rho - delta) * sp.exp(rho * t) + delta),
        "N": N * sp.exp(rho * t),
        "c": c,
        "eta": eta_p,
    })


def _seiar_names():
    return _s("S E I A R mu1 mu2 gamma p beta")


def _seiar1():
    S, E, I, A, R, mu1, mu2, gamma, p, beta = _seiar_names()
    t = TAU
    return ClosedFormFamily("seiar", 1, {
        "S": S + t, "E": E, "I": I, "A": A, "R": R - t,
        "mu1": mu1, "mu2": mu2, "gamma": gamma, "p": p,
        "beta": beta * S / (S + t),
    })


def _seiar2():
    S, E, I, A, R, mu1, mu2, gamma, p, beta = _seiar_names()
    t = TAU
    return ClosedFormFamily("seiar", 2, {
        "S": S + E * (1 - sp.exp(-t)), "E": E * sp.exp(-t), "I": I, "A": A, "R": R,
        "mu1": mu1, "mu2": mu2, "gamma": gamma * sp.exp(t), "p": p,
        "beta": (gamma * E * (1 - sp.exp(t)) - S * beta * (A + I)) / ((A + I) * (E - (E + S) * sp.exp(t))),
    })


def _visfm():
    r, phi, v, alpha, theta, A_y, A_x, A_y_d1 = _s("r phi v alpha theta A_y A_x A_y_d1")
    e = sp.exp(TAU)
    return ClosedFormFamily("visfm", 2, {
        "r": e * r, "phi": phi, "v": e * v, "alpha": alpha, "theta": theta,
        "A_y": e * A_y, "A_x": e * A_x, "A_y_d1": e * A_y_d1,
    })


CLOSED_FORMS = {"hiv": _hiv, "seiar-set1": _seiar1, "seiar-set2": _seiar2, "visfm": _visfm}


def closed_form(model_id: str) -> ClosedFormFamily:
    try:
        return CLOSED_FORMS[model_id]()
    except KeyError:
        raise KeyError(f"no closed form for {model_id!r}; known: {', '.join(CLOSED_FORMS)}") from None


def evaluate_closed_form(cf: ClosedFormFamily, base: Trajectory, tau_grid: Sequence[float]) -> FamilySolution:
    taus = np.array(sorted(set(float(t) for t in tau_grid)))
    names = list(base.state_names) + list(base.input_names)
    cols = {nm: (base.state[:, i] if i < len(base.state_names) else base.w[:, i - len(base.state_names)])
            for i, nm in enumerate(names)}
    T = base.time_grid.size
    out = {}
    for nm in names:
        e = cf.components.get(nm, sp.Symbol(nm))
        syms = sorted(e.free_symbols - {TAU}, key=lambda s: s.name)
        f = sp.lambdify([TAU, *syms], e, modules=["numpy"])
        with np.errstate(all="ignore"):
            out[nm] = np.stack([np.broadcast_to(np.asarray(f(tau, *[cols[s.name] for s in syms]), float), (T,))
                                for tau in taus], axis=1)
    X = np.stack([out[nm] for nm in base.state_names], axis=2)
    W = np.stack([out[nm] for nm in base.input_names], axis=2) if base.input_names else np.zeros((T, taus.size, 0))
    return FamilySolution(taus, base.time_grid.copy(), X, W, tuple(base.state_names), tuple(base.input_names),
                          "closed-form", f"{cf.model} generator {cf.generator}")


def family_text(cf: ClosedFormFamily) -> dict:
    return {k: to_text(v) for k, v in cf.components.items()}
