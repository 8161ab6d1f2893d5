"""Symbolic scalar expressions.

Expressions are plain immutable ``sympy`` trees. This module adds what the
rest of the package needs on top of them: a small infix parser for the model
file grammar (``^`` for powers, ``sin(...)`` call syntax), a printer that emits
the same grammar, exact partial derivatives, fast numeric evaluation and a
probabilistic zero test driven by random evaluation points.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
import sympy as sp
from sympy.printing.str import StrPrinter

Expr = sp.Expr

DEFAULT_TOL = 1e-9
DEFAULT_TRIALS = 16
DEFAULT_BOX = (0.1, 2.0)

TIME = sp.Symbol("t")
TAU = sp.Symbol("tau")


class Role(str, enum.Enum):
    STATE = "state"
    KNOWN_INPUT = "known-input"
    UNKNOWN_INPUT = "unknown-input"
    TIME = "time"
    TAU = "tau"
    FREE = "free-constant"


class ExprError(Exception):
    pass


class ParseError(ExprError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        self.line, self.col = line, col
        where = f" (line {line}, column {col})" if line else ""
        super().__init__(msg + where)


class EvaluationError(ExprError):
    """Division by zero, log of a non-positive number, missing symbol."""


class UnsampleableDomain(ExprError):
    pass


class UnsupportedNode(ExprError):
    pass


def symbol(name: str) -> sp.Symbol:
    return sp.Symbol(name)


# --------------------------------------------------------------------------
# parsing

_FUNCS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "atan2": sp.atan2,
    "arctan2": sp.atan2,
    "atan": sp.atan,
}
_CONSTS = {"pi": sp.pi}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+[eE][-+]?\d+|\d+)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text: str, line: int):
    pos = 0
    out = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos + 1)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    out.append(("end", "", len(text) + 1))
    return out


class _Parser:
    # precedence climbing; ^ is right associative and binds tighter than unary minus
    def __init__(self, text, symbols, line):
        self.toks = _tokenize(text, line)
        self.i = 0
        self.symbols = symbols
        self.line = line

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, col = self.take()
        if val != value:
            raise ParseError(f"expected {value!r}, got {val or 'end of input'!r}", self.line, col)

    def parse(self):
        e = self.sum()
        kind, val, col = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", self.line, col)
        return e

    def sum(self):
        e = self.product()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.product()
            e = e + rhs if op == "+" else e - rhs
        return e

    def product(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            e = e * rhs if op == "*" else e / rhs
        return e

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return -self.unary()
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            return base ** self.unary()
        return base

    def atom(self):
        kind, val, col = self.take()
        if kind == "num":
            if re.fullmatch(r"\d+", val):
                return sp.Integer(int(val))
            return sp.Float(val)
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in _FUNCS:
                    raise ParseError(f"unknown function {val!r}", self.line, col)
                self.take()
                args = [self.sum()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.sum())
                self.expect(")")
                try:
                    return _FUNCS[val](*args)
                except TypeError as exc:
                    raise ParseError(f"bad arguments to {val}: {exc}", self.line, col) from None
            if val in _CONSTS:
                return _CONSTS[val]
            if self.symbols is not None and val not in self.symbols:
                raise ParseError(f"undeclared symbol {val!r}", self.line, col)
            return self.symbols[val] if self.symbols is not None else sp.Symbol(val)
        if val == "(":
            e = self.sum()
            self.expect(")")
            return e
        raise ParseError(f"unexpected token {val or 'end of input'!r}", self.line, col)


def parse_expr(text: str, symbols: Mapping[str, sp.Symbol] | None = None, line: int = 0) -> Expr:
    """Parse infix text. With ``symbols`` given, unknown names are an error."""
    return sp.sympify(_Parser(text, symbols, line).parse())


class _GrammarPrinter(StrPrinter):
    def _print_Pow(self, expr, rational=False):
        b, e = expr.as_base_exp()
        if e == sp.S.Half:
            return f"sqrt({self._print(b)})"
        if e.is_Rational and e < 0:
            return f"1/{self.parenthesize(b ** -e, 50)}" if e != -1 else f"1/{self.parenthesize(b, 50)}"
        return f"{self.parenthesize(b, 60)}^{self.parenthesize(e, 60)}"

    def _print_Exp1(self, expr):
        return "exp(1)"

    def _print_Float(self, expr):
        return repr(float(expr))


def to_text(e: Expr) -> str:
    """Render an expression in the model-file grammar (round-trips through parse_expr)."""
    return _GrammarPrinter().doprint(sp.sympify(e))


# --------------------------------------------------------------------------
# calculus and simplification


def diff(e: Expr, s: sp.Symbol) -> Expr:
    try:
        return sp.diff(e, s)
    except NotImplementedError as exc:  # pragma: no cover - sympy covers all node kinds we parse
        raise UnsupportedNode(str(exc)) from exc


def simplify(e: Expr) -> Expr:
    """Light normalization: rational cancellation and like-term collection.

    Not a canonical form. Trigonometric and exponential subterms are treated
    as opaque generators by ``cancel``.
    """
    e = sp.sympify(e)
    if e.is_number:
        return e
    try:
        out = sp.cancel(sp.together(e))
    except (sp.PolynomialError, TypeError):
        out = sp.together(e)
    # prefer the shorter of the two renderings
    return out if sp.count_ops(out) <= sp.count_ops(e) else e


@lru_cache(maxsize=8192)
def _compiled(e: Expr, names: tuple[sp.Symbol, ...]):
    return sp.lambdify(names, e, modules=["numpy"])


def free_symbols(e: Expr) -> tuple[sp.Symbol, ...]:
    return tuple(sorted(sp.sympify(e).free_symbols, key=lambda s: s.name))


def compile_exprs(exprs: Sequence[Expr], symbols: Sequence[sp.Symbol]):
    """Vector-valued numeric function of ``symbols``; accepts numpy arrays."""
    return _compiled(sp.ImmutableMatrix(list(exprs)), tuple(symbols))


def evaluate(e: Expr, point: Mapping[sp.Symbol, float]) -> float:
    """IEEE-double value of ``e`` at ``point``."""
    e = sp.sympify(e)
    syms = free_symbols(e)
    missing = [s.name for s in syms if s not in point]
    if missing:
        raise EvaluationError(f"missing symbol(s): {', '.join(missing)}")
    if e.is_number:
        return float(e)
    with np.errstate(all="raise"):
        try:
            val = _compiled(e, syms)(*[float(point[s]) for s in syms])
        except (FloatingPointError, ZeroDivisionError) as exc:
            raise EvaluationError(str(exc)) from None
    val = complex(val)
    if not math.isfinite(val.real) or abs(val.imag) > 1e-12 * max(1.0, abs(val.real)):
        raise EvaluationError(f"non-real or non-finite value {val}")
    return val.real


# --------------------------------------------------------------------------
# random sampling


@dataclass
class Sampler:
    """Draws random evaluation points from a box.

    Symbols listed in ``positive`` are drawn from ``box``; the others get a
    random sign as well. ``overrides`` pins per-symbol intervals.
    """

    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    box: tuple[float, float] = DEFAULT_BOX
    positive: frozenset = frozenset()
    overrides: Mapping[sp.Symbol, tuple[float, float]] = field(default_factory=dict)

    def draw(self, symbols: Iterable[sp.Symbol]) -> dict:
        pt = {}
        for s in symbols:
            lo, hi = self.overrides.get(s, self.box)
            v = self.rng.uniform(lo, hi)
            if s not in self.positive and s not in self.overrides and self.rng.random() < 0.5:
                v = -v
            pt[s] = v
        return pt

    def with_positive(self, positive: Iterable[sp.Symbol]) -> "Sampler":
        return Sampler(self.rng, self.box, frozenset(positive), self.overrides)


def default_sampler(seed: int = 0, positive: Iterable[sp.Symbol] = ()) -> Sampler:
    return Sampler(np.random.default_rng(seed), DEFAULT_BOX, frozenset(positive))


def sample_values(exprs: Sequence[Expr], symbols: Sequence[sp.Symbol], sampler: Sampler, trials: int):
    """Evaluate ``exprs`` at ``trials`` random points; failing points are redrawn.

    Returns (points, values) with values of shape (trials, len(exprs)).
    """
    f = compile_exprs(exprs, symbols)
    pts, vals = [], []
    attempts = 0
    while len(pts) < trials:
        attempts += 1
        if attempts > 5 * trials + 5:
            raise UnsampleableDomain(f"could only evaluate at {len(pts)} of {trials} points")
        pt = sampler.draw(symbols)
        with np.errstate(all="raise"):
            try:
                v = np.asarray(f(*[pt[s] for s in symbols]), dtype=complex).reshape(-1)
            except (FloatingPointError, ZeroDivisionError, ValueError, OverflowError):
                continue
        if not np.all(np.isfinite(v)) or np.any(np.abs(v.imag) > 1e-12 * np.maximum(1, np.abs(v.real))):
            continue
        pts.append(pt)
        vals.append(v.real)
    return pts, np.array(vals)


def is_zero(
    e: Expr,
    tol: float = DEFAULT_TOL,
    trials: int = DEFAULT_TRIALS,
    sampler: Sampler | None = None,
) -> bool:
    """Probabilistic identity test: literal zero after simplification, or
    ``|e| < tol`` at every one of ``trials`` random points."""
    if trials < 8:
        raise ValueError("is_zero needs at least 8 trials")
    e = sp.sympify(e)
    if e == 0:
        return True
    if e.is_number:
        return abs(complex(e)) < tol
    if simplify(e) == 0:
        return True
    sampler = sampler or default_sampler()
    syms = free_symbols(e)
    _, vals = sample_values([e], syms, sampler, trials)
    return bool(np.all(np.abs(vals) < tol))
