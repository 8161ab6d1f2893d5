"""Input-affine ODE models.

    x' = g0(x, t) + sum_k f^k(x, t) u_k + sum_j g^j(x, t) w_j,   y = h(x, t)

Constant parameters are carried as extra state components with zero
dynamics; unknown inputs can be absorbed into the state together with their
time derivatives (finite unknown-input extension).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import sympy as sp

from .expr import TIME, Expr, ParseError, parse_expr, to_text


class ModelError(Exception):
    pass


class UndeclaredSymbol(ParseError):
    pass


class DimensionMismatch(ModelError):
    pass


class DuplicateSymbol(ModelError):
    pass


class NonAffine(ModelError):
    pass


Vec = tuple  # tuple of Expr, one per state component


@dataclass(frozen=True)
class Scenario:
    """Numeric data for simulation: initial state values, input signals as
    expressions of ``t`` and the time window."""

    initial: Mapping[str, float] = field(default_factory=dict)
    signals: Mapping[str, Expr] = field(default_factory=dict)
    time_span: tuple[float, float] = (0.0, 1.0)
    time_step: float | None = None
    tau: tuple[float, ...] = ()


@dataclass(frozen=True)
class Model:
    state: tuple[sp.Symbol, ...]
    known_inputs: tuple[sp.Symbol, ...]
    unknown_inputs: tuple[sp.Symbol, ...]
    g0: Vec
    f: tuple[Vec, ...]
    g: tuple[Vec, ...]
    outputs: tuple[Expr, ...]
    constants: tuple[sp.Symbol, ...] = ()
    params: tuple[sp.Symbol, ...] = ()  # free constants not yet in the state
    positive: frozenset = frozenset()
    output_names: tuple[str, ...] = ()
    override: tuple[Expr, ...] | None = None
    name: str = "model"
    scenario: Scenario | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.state)
        if not self.outputs:
            raise DimensionMismatch("model has no outputs")
        if len(self.g0) != n:
            raise DimensionMismatch(f"drift has {len(self.g0)} components, state has {n}")
        if len(self.f) != len(self.known_inputs) or len(self.g) != len(self.unknown_inputs):
            raise DimensionMismatch("number of input fields does not match the declared inputs")
        for vec in (*self.f, *self.g):
            if len(vec) != n:
                raise DimensionMismatch(f"input field has {len(vec)} components, state has {n}")
        names = [s.name for s in (*self.state, *self.known_inputs, *self.unknown_inputs, *self.params)]
        dup = {x for x in names if names.count(x) > 1}
        if dup:
            raise DuplicateSymbol(f"duplicate symbol(s): {', '.join(sorted(dup))}")
        if "t" in names:
            raise DuplicateSymbol("'t' is reserved for time")
        if not self.output_names:
            object.__setattr__(self, "output_names", tuple(f"y{i + 1}" for i in range(len(self.outputs))))

    @property
    def n(self) -> int:
        return len(self.state)

    @property
    def m_u(self) -> int:
        return len(self.known_inputs)

    @property
    def m_w(self) -> int:
        return len(self.unknown_inputs)

    @property
    def p(self) -> int:
        return len(self.outputs)

    @property
    def time_varying(self) -> bool:
        exprs = (*self.g0, *sum(self.f, ()), *sum(self.g, ()), *self.outputs)
        return any(sp.sympify(e).has(TIME) for e in exprs)

    def symbols(self) -> dict[str, sp.Symbol]:
        out = {s.name: s for s in (*self.state, *self.known_inputs, *self.unknown_inputs, *self.params)}
        out["t"] = TIME
        return out

    def index(self, s: sp.Symbol | str) -> int:
        name = s if isinstance(s, str) else s.name
        return [x.name for x in self.state].index(name)

    def rhs(self) -> tuple[Expr, ...]:
        """Full right-hand side with the inputs written in."""
        out = []
        for i in range(self.n):
            e = self.g0[i]
            e += sum(fk[i] * uk for fk, uk in zip(self.f, self.known_inputs))
            e += sum(gj[i] * wj for gj, wj in zip(self.g, self.unknown_inputs))
            out.append(e)
        return tuple(out)


@dataclass(frozen=True)
class ParameterSpec:
    name: sp.Symbol
    kind: str  # "constant" | "time-varying"


@dataclass(frozen=True)
class ExtensionRecord:
    """Unknown inputs absorbed into the state, and how the unknown inputs of
    the extended system relate to the original ones.

    ``orders`` maps an original input name to the number J of its
    derivatives (w, w', ..., w^(J-1)) now carried in the state. ``ui_map``
    gives every unknown input of the extended system as an expression of the
    original inputs, their derivatives and the state.
    """

    orders: Mapping[str, int] = field(default_factory=dict)
    ui_map: Mapping[str, Expr] = field(default_factory=dict)
    order: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.orders

    def merged(self, other: "ExtensionRecord") -> "ExtensionRecord":
        orders = dict(self.orders)
        for k, v in other.orders.items():
            orders[k] = orders.get(k, 0) + v
        return ExtensionRecord(orders, {**self.ui_map, **other.ui_map}, other.order or self.order)


_DERIV = re.compile(r"^(.*)_d(\d+)$")


def derivative_name(name: str, k: int) -> str:
    """Name of the k-th time derivative of the input called ``name``."""
    m = _DERIV.match(name)
    base, k0 = (m.group(1), int(m.group(2))) if m else (name, 0)
    return base if k0 + k == 0 else f"{base}_d{k0 + k}"


def split_derivative(name: str) -> tuple[str, int]:
    m = _DERIV.match(name)
    return (m.group(1), int(m.group(2))) if m else (name, 0)


def _zero_vec(n):
    return (sp.S.Zero,) * n


def augment_constants(m: Model, params: Sequence[ParameterSpec]) -> Model:
    """Move constant parameters into the state with zero dynamics."""
    consts = [p.name for p in params if p.kind == "constant"]
    for p in params:
        if p.kind == "time-varying" and p.name not in m.unknown_inputs:
            raise ModelError(f"time-varying parameter {p.name} must be declared as an unknown input")
    if not consts:
        return m
    present = {s.name for s in m.state}
    for c in consts:
        if c.name in present:
            raise DuplicateSymbol(f"{c} is already a state component")
    k = len(consts)
    pad = lambda vec: tuple(vec) + _zero_vec(k)  # noqa: E731
    return replace(
        m,
        state=m.state + tuple(consts),
        g0=pad(m.g0),
        f=tuple(pad(v) for v in m.f),
        g=tuple(pad(v) for v in m.g),
        constants=m.constants + tuple(consts),
        params=tuple(p for p in m.params if p not in consts),
    )


def uie_extend(m: Model, orders: Mapping) -> tuple[Model, ExtensionRecord]:
    """Absorb unknown inputs and their first J-1 derivatives into the state.

    The J-th derivative becomes the new unknown input, in the slot of the
    original one.
    """
    orders = {(k if isinstance(k, str) else k.name): int(v) for k, v in orders.items()}
    for k, J in orders.items():
        if J < 1:
            raise ValueError(f"extension order for {k} must be >= 1")
        if k not in [w.name for w in m.unknown_inputs]:
            raise ModelError(f"{k} is not an unknown input")
    if not orders:
        return m, ExtensionRecord()
    state, g0 = list(m.state), list(m.g0)
    f = [list(v) for v in m.f]
    new_w, new_g = [], []
    positive = set(m.positive)
    rec_orders = {}
    for wj, gj in zip(m.unknown_inputs, m.g):
        J = orders.get(wj.name)
        if J is None:
            new_w.append(wj)
            new_g.append(list(gj))
            continue
        chain = [sp.Symbol(derivative_name(wj.name, i)) for i in range(J + 1)]
        # w enters the old rows as a state component now
        for i in range(len(g0)):
            g0[i] = g0[i] + gj[i] * chain[0]
        state.extend(chain[:J])
        g0.extend(chain[1:J] + [sp.S.Zero])
        for v in f:
            v.extend([sp.S.Zero] * J)
        for v in new_g:
            v.extend([sp.S.Zero] * J)
        new_w.append(chain[J])
        new_g.append(None)
        base, _ = split_derivative(wj.name)
        rec_orders[base] = rec_orders.get(base, 0) + J
        if wj in positive:
            positive.add(chain[0])
    n = len(state)
    for idx, vec in enumerate(new_g):
        if vec is None:
            vec = [sp.S.Zero] * n
            vec[state.index(sp.Symbol(derivative_name(new_w[idx].name, -1)))] = sp.S.One
            new_g[idx] = vec
        else:
            vec.extend([sp.S.Zero] * (n - len(vec)))
            new_g[idx] = vec
    out = replace(
        m,
        state=tuple(state),
        unknown_inputs=tuple(new_w),
        g0=tuple(g0),
        f=tuple(tuple(v) for v in f),
        g=tuple(tuple(v) for v in new_g),
        positive=frozenset(positive),
    )
    return out, ExtensionRecord(rec_orders, {w.name: w for w in new_w}, tuple(w.name for w in new_w))


# --------------------------------------------------------------------------
# model file

_LIST = re.compile(r"^\[(.*)\]$", re.S)
_SECTIONS = ("dynamics", "outputs", "initial", "signals")
_KEYS = (
    "name", "states", "known_inputs", "unknown_inputs", "constants", "positive",
    "codistribution_override", "time", "time_step", "tau",
)


def _split_top(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def _logical_lines(text: str):
    """Yield (lineno, text) with comments stripped and bracket continuation joined."""
    buf, start, depth = [], 0, 0
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not buf and not line.strip():
            continue
        if not buf:
            start = no
        buf.append(line)
        depth += line.count("[") - line.count("]")
        if depth <= 0:
            yield start, " ".join(x.strip() if i else x.rstrip() for i, x in enumerate(buf))
            buf, depth = [], 0
    if buf:
        raise ParseError("unterminated '['", start, 1)


def parse_model(text: str) -> Model:
    """Parse the model-file format (see README for the grammar)."""
    keys: dict[str, tuple[int, str]] = {}
    sections: dict[str, list[tuple[int, str]]] = {s: [] for s in _SECTIONS}
    current = None
    for no, line in _logical_lines(text):
        stripped = line.strip()
        indented = line[:1].isspace()
        head = stripped[:-1].strip() if stripped.endswith(":") else None
        if head in _SECTIONS and not indented:
            current = head
            continue
        if current and (indented or head is None and "=" in stripped and stripped.split("=")[0].strip() not in _KEYS):
            sections[current].append((no, stripped))
            continue
        current = None
        if "=" not in stripped:
            raise ParseError(f"expected 'key = value', got {stripped!r}", no, 1)
        k, v = stripped.split("=", 1)
        k = k.strip()
        if k not in _KEYS:
            raise ParseError(f"unknown key {k!r}", no, 1)
        keys[k] = (no, v.strip())

    def names(key):
        if key not in keys:
            return []
        no, v = keys[key]
        m = _LIST.match(v)
        if not m:
            raise ParseError(f"{key} must be a bracketed list", no, 1)
        out = _split_top(m.group(1))
        for x in out:
            if not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", x):
                raise ParseError(f"bad symbol name {x!r}", no, 1)
        return out

    states = [sp.Symbol(x) for x in names("states")]
    kin = [sp.Symbol(x) for x in names("known_inputs")]
    uin = [sp.Symbol(x) for x in names("unknown_inputs")]
    consts = [sp.Symbol(x) for x in names("constants")]
    if not states:
        raise DimensionMismatch("no states declared")
    table = {s.name: s for s in (*states, *kin, *uin, *consts)}
    all_names = [s.name for s in (*states, *kin, *uin, *consts)]
    dup = {x for x in all_names if all_names.count(x) > 1}
    if dup:
        raise DuplicateSymbol(f"duplicate symbol(s): {', '.join(sorted(dup))}")
    if "t" in table:
        raise DuplicateSymbol("'t' is reserved for time")
    table["t"] = TIME

    def expr(no, txt):
        try:
            return parse_expr(txt, table, line=no)
        except ParseError as exc:
            if "undeclared" in str(exc):
                raise UndeclaredSymbol(str(exc).split(" (line")[0], exc.line, exc.col) from None
            raise

    rhs = {}
    for no, line in sections["dynamics"]:
        m = re.fullmatch(r"([A-Za-z_][A-Za-z_0-9]*)\s*'\s*=\s*(.+)", line)
        if not m:
            raise ParseError(f"expected \"name' = expr\", got {line!r}", no, 1)
        nm = m.group(1)
        if nm not in {s.name for s in states}:
            if nm in {c.name for c in consts}:
                raise ModelError(f"constant {nm} cannot have dynamics (line {no})")
            raise UndeclaredSymbol(f"dynamics for undeclared state {nm!r}", no, 1)
        if nm in rhs:
            raise DuplicateSymbol(f"two dynamics lines for {nm} (line {no})")
        rhs[nm] = expr(no, m.group(2))
    missing = [s.name for s in states if s.name not in rhs]
    if missing:
        raise DimensionMismatch(f"missing dynamics for: {', '.join(missing)}")

    outputs, out_names = [], []
    for no, line in sections["outputs"]:
        m = re.fullmatch(r"([A-Za-z_][A-Za-z_0-9]*)\s*=\s*(.+)", line)
        nm, txt = (m.group(1), m.group(2)) if m else (f"y{len(outputs) + 1}", line)
        e = expr(no, txt)
        bad = [s.name for s in e.free_symbols if s in kin or s in uin]
        if bad:
            raise ModelError(f"outputs may depend only on the state and t (line {no}: {', '.join(bad)})")
        outputs.append(e)
        out_names.append(nm)
    if not outputs:
        raise DimensionMismatch("empty outputs section")

    g0, fk, gj = [], [[] for _ in kin], [[] for _ in uin]
    zero = {s: 0 for s in (*kin, *uin)}
    for s in states:
        e = rhs[s.name]
        g0.append(e.subs(zero))
        for lst, inputs in ((fk, kin), (gj, uin)):
            for k, v in enumerate(inputs):
                coef = sp.diff(e, v)
                if coef.free_symbols & set(kin) | coef.free_symbols & set(uin):
                    raise NonAffine(f"dynamics of {s} are not affine in {v}")
                lst[k].append(coef)
        lin = g0[-1] + sum(c[-1] * v for c, v in zip(fk, kin)) + sum(c[-1] * v for c, v in zip(gj, uin))
        if sp.expand(lin - e) != 0:
            raise NonAffine(f"dynamics of {s} are not input-affine")

    override = None
    if "codistribution_override" in keys:
        no, v = keys["codistribution_override"]
        m = _LIST.match(v)
        if not m:
            raise ParseError("codistribution_override must be a bracketed list", no, 1)
        override_table = dict(table)
        for w in uin:
            # derivatives of unknown inputs may appear once the input is absorbed
            for k in range(1, 6):
                nm = derivative_name(w.name, k)
                override_table.setdefault(nm, sp.Symbol(nm))
        override = tuple(parse_expr(x, override_table, line=no) for x in _split_top(m.group(1)))

    positive = frozenset(table[x] for x in names("positive") if x in table or _raise_undeclared(x, keys["positive"][0]))
    model = Model(
        state=tuple(states),
        known_inputs=tuple(kin),
        unknown_inputs=tuple(uin),
        g0=tuple(g0),
        f=tuple(tuple(v) for v in fk),
        g=tuple(tuple(v) for v in gj),
        outputs=tuple(outputs),
        params=tuple(consts),
        positive=positive,
        output_names=tuple(out_names),
        override=override,
        name=keys["name"][1] if "name" in keys else "model",
    )
    model = augment_constants(model, [ParameterSpec(c, "constant") for c in consts])
    return replace(model, scenario=_parse_scenario(keys, sections, table))


def _raise_undeclared(name, no):
    raise UndeclaredSymbol(f"undeclared symbol {name!r} in positive list", no, 1)


def _parse_scenario(keys, sections, table) -> Scenario | None:
    if not sections["initial"] and not sections["signals"] and "time" not in keys:
        return None
    initial, signals = {}, {}
    for no, line in sections["initial"]:
        k, _, v = line.partition("=")
        k = k.strip()
        if k not in table:
            raise UndeclaredSymbol(f"initial value for undeclared symbol {k!r}", no, 1)
        initial[k] = float(parse_expr(v.strip(), {"t": TIME}, line=no))
    for no, line in sections["signals"]:
        k, _, v = line.partition("=")
        k = k.strip()
        if k not in table:
            raise UndeclaredSymbol(f"signal for undeclared input {k!r}", no, 1)
        signals[k] = parse_expr(v.strip(), {"t": TIME}, line=no)
    span = (0.0, 1.0)
    if "time" in keys:
        no, v = keys["time"]
        vals = [float(parse_expr(x, {}, line=no)) for x in _split_top(v.strip("[] "))]
        if len(vals) != 2 or not vals[1] > vals[0]:
            raise ParseError("time must be [t0, t1] with t1 > t0", no, 1)
        span = (vals[0], vals[1])
    step = float(keys["time_step"][1]) if "time_step" in keys else None
    tau = ()
    if "tau" in keys:
        no, v = keys["tau"]
        tau = tuple(float(parse_expr(x, {}, line=no)) for x in _split_top(v.strip("[] ")))
    return Scenario(initial, signals, span, step, tau)


def load_model(path: str | Path) -> Model:
    return parse_model(Path(path).read_text(encoding="utf-8"))


def model_to_text(m: Model) -> str:
    """Serialize a model back to the file format; ``parse_model`` inverts it."""
    consts = set(m.constants)
    lines = [f"name = {m.name}"]
    fmt = lambda xs: "[" + ", ".join(s.name for s in xs) + "]"  # noqa: E731
    lines.append("states = " + fmt([s for s in m.state if s not in consts]))
    lines.append("known_inputs = " + fmt(m.known_inputs))
    lines.append("unknown_inputs = " + fmt(m.unknown_inputs))
    lines.append("constants = " + fmt(m.constants + m.params))
    if m.positive:
        order = [s for s in (*m.state, *m.known_inputs, *m.unknown_inputs, *m.params) if s in m.positive]
        lines.append("positive = " + fmt(order))
    lines.append("")
    lines.append("dynamics:")
    for s, e in zip(m.state, m.rhs()):
        if s in consts:
            continue
        lines.append(f"    {s.name}' = {to_text(e)}")
    lines.append("outputs:")
    for nm, e in zip(m.output_names, m.outputs):
        lines.append(f"    {nm} = {to_text(e)}")
    if m.override is not None:
        lines.append("codistribution_override = [" + ", ".join(to_text(e) for e in m.override) + "]")
    return "\n".join(lines) + "\n"


def models_equal(a: Model, b: Model) -> bool:
    """Structural equality up to expansion of every component expression."""
    if (a.state, a.known_inputs, a.unknown_inputs, a.constants) != (b.state, b.known_inputs, b.unknown_inputs, b.constants):
        return False
    pairs = [
        (a.g0, b.g0), (a.outputs, b.outputs),
        *zip(a.f, b.f), *zip(a.g, b.g),
    ]
    return all(
        len(x) == len(y) and all(sp.expand(sp.sympify(p) - sp.sympify(q)) == 0 for p, q in zip(x, y))
        for x, y in pairs
    )
