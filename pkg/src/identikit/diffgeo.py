"""Lie calculus over a model: Lie derivatives, differentials, the unknown-input
reconstructability matrix, generic rank by random evaluation and the
orthogonal distribution of a codistribution."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import sympy as sp

from .expr import (
    DEFAULT_TOL,
    DEFAULT_TRIALS,
    TIME,
    Expr,
    ExprError,
    Sampler,
    compile_exprs,
    default_sampler,
    free_symbols,
    is_zero,
    simplify,
)
from .model import Model

RANK_RTOL = 1e-8


class SymbolicEliminationFailed(ExprError):
    pass


@dataclass(frozen=True)
class VectorField:
    components: tuple
    label: str = ""

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def scaled(self, factor: Expr) -> "VectorField":
        return VectorField(tuple(simplify(factor * c) for c in self.components), self.label)


@dataclass(frozen=True)
class CovectorField:
    components: tuple
    label: str = ""

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def pair(self, v: Sequence[Expr]) -> Expr:
        return sum((a * b for a, b in zip(self.components, v)), sp.S.Zero)


def lie(v: Sequence[Expr], phi: Expr, state: Sequence[sp.Symbol], simplify_result: bool = True) -> Expr:
    """L_v phi = sum_i dphi/dx_i v_i."""
    phi = sp.sympify(phi)
    out = sp.S.Zero
    fs = phi.free_symbols
    for x, vi in zip(state, v):
        if x in fs and vi != 0:
            out += sp.diff(phi, x) * vi
    return simplify(out) if simplify_result else out


def lie_dot_drift(m: Model, phi: Expr, simplify_result: bool = True) -> Expr:
    """L_g0 phi + dphi/dt."""
    out = lie(m.g0, phi, m.state, False) + sp.diff(phi, TIME)
    return simplify(out) if simplify_result else out


def differential(phi: Expr, state: Sequence[sp.Symbol], label: str = "") -> CovectorField:
    phi = sp.sympify(phi)
    return CovectorField(tuple(sp.diff(phi, x) for x in state), label or f"d({phi})")


def reconstructability_matrix(m: Model, fns: Sequence[Expr]) -> sp.Matrix:
    """Entry (i, j) is L_{g^j} fns[i]."""
    if not fns:
        raise ValueError("reconstructability matrix needs at least one function")
    return sp.Matrix(len(fns), m.m_w, lambda i, j: lie(m.g[j], fns[i], m.state))


def sampler_for(m: Model, seed: int = 0, box=None) -> Sampler:
    s = default_sampler(seed, m.positive)
    if box is not None:
        s.box = box
    return s


def numeric_rank(A: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0 or not np.isfinite(s[0]):
        return 0
    return int((s > rtol * s[0]).sum())


@dataclass(frozen=True)
class RankResult:
    rank: int
    witness: dict

    def __int__(self):
        return self.rank

    def __eq__(self, other):
        if isinstance(other, int):
            return self.rank == other
        return NotImplemented

    def __hash__(self):
        return hash(self.rank)


def _matrix_symbols(M) -> tuple:
    out = set()
    for e in M:
        out |= sp.sympify(e).free_symbols
    return tuple(sorted(out, key=lambda s: s.name))


def generic_rank(
    M,
    sampler: Sampler | None = None,
    trials: int = DEFAULT_TRIALS,
    rtol: float = RANK_RTOL,
) -> RankResult:
    """Maximum numeric rank of the symbolic matrix over ``trials`` random
    points, together with a point attaining it."""
    M = sp.Matrix(M)
    if M.rows == 0 or M.cols == 0 or all(e == 0 for e in M):
        return RankResult(0, {})
    sampler = sampler or default_sampler()
    syms = _matrix_symbols(M)
    f = compile_exprs(list(M), syms)
    best, witness, ok = -1, {}, 0
    attempts = 0
    while ok < trials:
        attempts += 1
        if attempts > 5 * trials + 5:
            from .expr import UnsampleableDomain

            raise UnsampleableDomain(f"could only evaluate at {ok} of {trials} points")
        pt = sampler.draw(syms)
        with np.errstate(all="ignore"):
            try:
                vals = np.asarray(f(*[pt[s] for s in syms]), dtype=complex).reshape(M.rows, M.cols)
            except (ZeroDivisionError, ValueError, OverflowError):
                continue
        if not np.all(np.isfinite(vals)) or np.any(np.abs(vals.imag) > 1e-12 * np.maximum(1, np.abs(vals.real))):
            continue
        ok += 1
        r = numeric_rank(vals.real, rtol)
        if r > best:
            best, witness = r, {s.name: float(v) for s, v in pt.items()}
    return RankResult(best, witness)


def jacobian(fns: Sequence[Expr], state: Sequence[sp.Symbol]) -> sp.Matrix:
    return sp.Matrix([[sp.diff(sp.sympify(f), x) for x in state] for f in fns])


class PointCloud:
    """A fixed set of random evaluation points used for repeated rank tests
    while a codistribution is grown one covector at a time."""

    def __init__(self, symbols: Sequence[sp.Symbol], sampler: Sampler, trials: int = DEFAULT_TRIALS):
        self.symbols = tuple(symbols)
        self.points = [sampler.draw(self.symbols) for _ in range(trials)]
        self.args = [np.array([p[s] for s in self.symbols]) for p in self.points]

    def values(self, exprs: Sequence[Expr]) -> np.ndarray:
        """Array (points, len(exprs)); NaN where evaluation fails."""
        f = compile_exprs(exprs, self.symbols)
        out = np.full((len(self.points), len(exprs)), np.nan)
        for k, a in enumerate(self.args):
            with np.errstate(all="ignore"):
                try:
                    v = np.asarray(f(*a), dtype=complex).reshape(-1)
                except (ZeroDivisionError, ValueError, OverflowError):
                    continue
            if np.all(np.isfinite(v)) and not np.any(np.abs(v.imag) > 1e-12 * np.maximum(1, np.abs(v.real))):
                out[k] = v.real
        return out


class RankTracker:
    """Incremental generic rank of a growing list of gradients."""

    def __init__(self, state: Sequence[sp.Symbol], cloud: PointCloud, rtol: float = RANK_RTOL):
        self.state = tuple(state)
        self.cloud = cloud
        self.rtol = rtol
        self.rows: list[np.ndarray] = []  # each (points, n)
        self.rank = 0

    def gradient(self, phi: Expr) -> np.ndarray:
        grad = [sp.diff(phi, x) for x in self.state]
        return self.cloud.values(grad)

    def rank_with(self, grad: np.ndarray | None) -> int:
        stack = self.rows + ([grad] if grad is not None else [])
        if not stack:
            return 0
        A = np.stack(stack, axis=1)  # (points, k, n)
        best = 0
        for k in range(A.shape[0]):
            if np.all(np.isfinite(A[k])):
                best = max(best, numeric_rank(A[k], self.rtol))
        return best

    def raises(self, phi: Expr) -> tuple[bool, np.ndarray]:
        g = self.gradient(phi)
        return self.rank_with(g) > self.rank, g

    def add(self, grad: np.ndarray):
        self.rows.append(grad)
        self.rank = self.rank_with(None)


# --------------------------------------------------------------------------
# orthogonal distribution


def _zero_test(sampler: Sampler, tol: float, trials: int):
    def test(e):
        return is_zero(e, tol=tol, trials=trials, sampler=sampler)

    return test


def _solve_symbolic(B: sp.Matrix, C: sp.Matrix, iszero) -> sp.Matrix:
    """Gauss-Jordan solve of B Z = C with pivot choice by a zero test."""
    r = B.rows
    A = B.row_join(C).as_mutable()
    for col in range(r):
        piv = None
        for row in range(col, r):
            if not iszero(A[row, col]):
                piv = row
                break
        if piv is None:
            raise SymbolicEliminationFailed(f"no usable pivot in column {col}")
        if piv != col:
            A.row_swap(piv, col)
        p = A[col, col]
        for j in range(A.cols):
            A[col, j] = sp.cancel(sp.together(A[col, j] / p)) if A[col, j] != 0 else A[col, j]
        for row in range(r):
            if row == col or A[row, col] == 0:
                continue
            fac = A[row, col]
            for j in range(A.cols):
                if A[col, j] != 0:
                    A[row, j] = sp.cancel(sp.together(A[row, j] - fac * A[col, j]))
    return A[:, r:]


def _clear_denominators(vec: list[Expr]) -> list[Expr]:
    nums, dens = [], []
    for e in vec:
        n, d = sp.fraction(sp.cancel(sp.together(e)))
        nums.append(n)
        dens.append(d)
    try:
        L = sp.lcm_list(dens) if len(dens) > 1 else dens[0]
    except (sp.PolynomialError, TypeError):
        L = sp.Mul(*set(dens))
    out = [sp.cancel(n * L / d) for n, d in zip(nums, dens)]
    nz = [e for e in out if e != 0]
    if len(nz) > 1:
        try:
            g = sp.gcd_list(nz)
            if g != 0 and not g.is_number:
                out = [sp.cancel(e / g) for e in out]
        except (sp.PolynomialError, TypeError):
            pass
    # drop integer content
    nz = [e for e in out if e != 0]
    if nz:
        contents = []
        for e in nz:
            c, _ = sp.sympify(e).as_content_primitive()
            contents.append(c)
        if all(c.is_Rational for c in contents):
            g = sp.gcd_list(contents) if len(contents) > 1 else contents[0]
            if g not in (0, 1):
                out = [sp.expand(e / g) if e.is_polynomial() else sp.cancel(e / g) for e in out]
    return [sp.factor(e) if e != 0 and e.is_polynomial() else e for e in out]


def _pick_pivots(J: np.ndarray, rtol: float) -> tuple[list[int], list[int]]:
    """Greedy independent rows, then leftmost independent columns."""
    rows = []
    for i in range(J.shape[0]):
        if numeric_rank(J[rows + [i]], rtol) > len(rows):
            rows.append(i)
    cols = []
    for j in range(J.shape[1]):
        if numeric_rank(J[np.ix_(rows, cols + [j])], rtol) > len(cols):
            cols.append(j)
        if len(cols) == len(rows):
            break
    return rows, cols


def orthogonal_distribution(
    gens: Sequence[CovectorField],
    m: Model | Sequence[sp.Symbol],
    sampler: Sampler | None = None,
    normalize: bool = False,
    tol: float = DEFAULT_TOL,
    trials: int = DEFAULT_TRIALS,
) -> list[VectorField]:
    """Symbolic basis of the vector fields annihilated by every generator.

    Pivot columns are chosen numerically at a random point; the pivot block is
    then eliminated symbolically. Each basis field gets denominators cleared
    and its first nonzero entry made positive at the sample point.
    """
    state = tuple(m.state) if isinstance(m, Model) else tuple(m)
    positive = m.positive if isinstance(m, Model) else frozenset()
    sampler = sampler or default_sampler(0, positive)
    n = len(state)
    if not gens:
        return [VectorField(tuple(sp.S.One if k == j else sp.S.Zero for k in range(n)), f"e{j + 1}") for j in range(n)]
    J = sp.Matrix([list(g.components) for g in gens])
    rk = generic_rank(J, sampler, trials)
    if rk.rank >= n:
        return []
    syms = _matrix_symbols(J)
    # numeric pivot search at the witness point (any generic point will do)
    pt = {s: rk.witness.get(s.name, 0.7) for s in syms}
    Jn = np.array(compile_exprs(list(J), syms)(*[pt[s] for s in syms]), dtype=float).reshape(J.rows, J.cols) if syms else np.array(J, dtype=float)
    rows, cols = _pick_pivots(Jn, RANK_RTOL)
    if len(rows) != rk.rank:
        raise SymbolicEliminationFailed("pivot search disagrees with generic rank")
    free = [j for j in range(n) if j not in cols]
    iszero = _zero_test(sampler, tol, trials)
    out = []
    if rows:
        B = J.extract(rows, cols)
        C = -J.extract(rows, free)
        Z = _solve_symbolic(B, C, iszero)
    for k, fcol in enumerate(free):
        vec = [sp.S.Zero] * n
        vec[fcol] = sp.S.One
        for a, pc in enumerate(cols):
            vec[pc] = Z[a, k]
        vec = _clear_denominators(vec)
        # orientation: first nonzero entry positive at a sample point
        first = next(e for e in vec if e != 0)
        val = _sample_value(first, sampler)
        if val < 0:
            vec = [-e for e in vec]
        if normalize:
            first = next(e for e in vec if not iszero(e))
            vec = [sp.cancel(e / first) for e in vec]
        xi = VectorField(tuple(sp.sympify(e) for e in vec), f"xi{k + 1}")
        for g in gens:
            if not iszero(g.pair(xi.components)):
                raise SymbolicEliminationFailed(f"{xi.label} is not annihilated by {g.label}")
        out.append(xi)
    return out


def _sample_value(e: Expr, sampler: Sampler) -> float:
    from .expr import sample_values

    e = sp.sympify(e)
    if e.is_number:
        return float(e)
    _, vals = sample_values([e], free_symbols(e), sampler, 1)
    return float(vals[0, 0])


def numeric_null_basis(J: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (columns) of the numeric nullspace."""
    if J.size == 0:
        return np.eye(J.shape[1])
    u, s, vt = np.linalg.svd(J)
    r = int((s > rtol * s[0]).sum()) if s.size and s[0] > 0 else 0
    return vt[r:].T


def symbolic_inverse(M: sp.Matrix, iszero=None) -> sp.Matrix:
    """Adjugate over determinant for small matrices, Gauss-Jordan otherwise."""
    M = sp.Matrix(M)
    k = M.rows
    if k == 0:
        return sp.zeros(0, 0)
    if k <= 3:
        det = sp.cancel(sp.together(M.det(method="berkowitz")))
        if det == 0:
            raise ZeroDivisionError("matrix is singular")
        adj = M.adjugate()
        return adj.applyfunc(lambda e: simplify(e / det))
    iszero = iszero or (lambda e: is_zero(e))
    return _solve_symbolic(M, sp.eye(k), iszero).applyfunc(simplify)
