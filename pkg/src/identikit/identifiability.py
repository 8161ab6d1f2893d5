"""Per-parameter local identifiability verdicts with evidence.

Constant parameters and absorbed unknown-input derivatives are state
components: they are identifiable iff their differential lies in the
observability codistribution. The first ``m`` unknown inputs of the system
are tested with the condition sum_i nu^i_j xi^alpha_i = 0 over a basis of the
orthogonal distribution; the remaining ones are never identifiable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import sympy as sp

from .codistribution import UioOptions, UioResult, build_uio, membership, unit_covector, uio_record
from .diffgeo import SymbolicEliminationFailed, VectorField, lie, lie_dot_drift, orthogonal_distribution, symbolic_inverse
from .expr import ExprError, is_zero, simplify, to_text
from .model import Model, derivative_name


class SingularMu(ExprError):
    pass


KINDS = ("constant", "tv-first-m", "tv-excess", "original-ui-derivative")


@dataclass(frozen=True)
class MuNu:
    mu: sp.Matrix  # mu[i, j] = L_{g^i} h~_j
    nu: sp.Matrix


@dataclass(frozen=True)
class XiCoefficients:
    xi: VectorField
    # alpha -> [xi^alpha_1, ..., xi^alpha_m]; alpha is 0..m, then known-input names
    coeffs: dict

    def __getitem__(self, alpha):
        return self.coeffs[alpha]


@dataclass
class Verdict:
    name: str
    kind: str
    identifiable: bool
    evidence: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return "locally-identifiable" if self.identifiable else "unidentifiable"


@dataclass
class IdentifiabilityReport:
    system: str
    parameters: list
    canonic: bool
    observable: bool
    certified: bool
    uio: UioResult
    basis: list
    m: int
    mu_nu: MuNu | None = None

    def verdict(self, name: str) -> Verdict:
        for v in self.parameters:
            if v.name == name:
                return v
        raise KeyError(name)

    def table(self) -> dict:
        return {v.name: v.identifiable for v in self.parameters}


def _tester(u: UioResult, offset: int = 11):
    sampler = u.sampler(offset)
    tol, trials = u.options.tol, u.options.trials

    def iz(e):
        return is_zero(e, tol=tol, trials=trials, sampler=sampler)

    return iz


def mu_nu(u: UioResult) -> MuNu:
    E, m = u.model, u.m
    if m < 1:
        raise SingularMu("no unknown input is reconstructable (m = 0)")
    mu = sp.Matrix(m, m, lambda i, j: lie(E.g[i], u.h_tilde[j], E.state))
    try:
        nu = symbolic_inverse(mu)
    except ZeroDivisionError as exc:
        raise SingularMu(str(exc)) from None
    iz = _tester(u)
    prod = mu * nu
    for i in range(m):
        for j in range(m):
            if not iz(prod[i, j] - (1 if i == j else 0)):
                raise SingularMu("mu * nu is not the identity")
    return MuNu(mu, nu)


def xi_coefficients(u: UioResult, xi: VectorField | Sequence) -> XiCoefficients:
    """xi^0_i from the time-augmented drift derivative, xi^alpha_i from the
    unknown-input fields and, for systems with known inputs, one extra row per
    known-input field."""
    E = u.model
    comps = list(xi.components if isinstance(xi, VectorField) else xi)
    xi = xi if isinstance(xi, VectorField) else VectorField(tuple(comps))

    def along(phi):
        return simplify(sum((sp.diff(phi, x) * c for x, c in zip(E.state, comps) if c != 0), sp.S.Zero))

    coeffs = {0: [along(lie_dot_drift(E, h)) for h in u.h_tilde]}
    for a in range(1, u.m + 1):
        coeffs[a] = [along(lie(E.g[a - 1], h, E.state)) for h in u.h_tilde]
    for uk, f in zip(E.known_inputs, E.f):
        coeffs[uk.name] = [along(lie(f, h, E.state)) for h in u.h_tilde]
    return XiCoefficients(xi, coeffs)


def condition_residual(mn: MuNu, xc: XiCoefficients, j: int, alpha) -> sp.Expr:
    """sum_i nu^i_j xi^alpha_i, with j 1-based."""
    col = xc[alpha]
    return simplify(sum((mn.nu[i, j - 1] * col[i] for i in range(len(col))), sp.S.Zero))


def check_tv(
    u: UioResult,
    j: int,
    basis: Sequence[VectorField] | None = None,
    mn: MuNu | None = None,
) -> Verdict:
    """Condition for the j-th (1-based) of the first m unknown inputs."""
    if not 1 <= j <= u.m:
        raise ValueError(f"j must be in 1..{u.m}")
    name = u.model.unknown_inputs[j - 1].name
    basis = orthogonal_basis(u) if basis is None else basis
    if not basis:
        return Verdict(name, "tv-first-m", True, {"reason": "state observable: orthogonal distribution is trivial"})
    mn = mn or mu_nu(u)
    iz = _tester(u, 13)
    violations = []
    for k, xi in enumerate(basis):
        xc = xi_coefficients(u, xi)
        for alpha in xc.coeffs:
            res = condition_residual(mn, xc, j, alpha)
            if not iz(res):
                violations.append({"xi": k + 1, "alpha": alpha, "residual": to_text(res)})
    if not violations:
        return Verdict(name, "tv-first-m", True, {"reason": "condition holds for every basis field and alpha"})
    return Verdict(name, "tv-first-m", False, {"first_violation": violations[0], "violations": violations})


def check_tv_excess(u: UioResult, j: int) -> Verdict:
    if not u.m < j <= u.model.m_w:
        raise ValueError(f"j must be in {u.m + 1}..{u.model.m_w}")
    name = u.model.unknown_inputs[j - 1].name
    return Verdict(name, "tv-excess", False, {"shift_family": f"{name}' = {name} + tau"})


def orthogonal_basis(u: UioResult, normalize: bool = False) -> list[VectorField]:
    if u.observable:
        return []
    return orthogonal_distribution(list(u.O), u.model, u.sampler(3), normalize=normalize,
                                   tol=u.options.tol, trials=u.options.trials)


def _state_verdict(u, name, kind, basis, extra=None) -> Verdict:
    E = u.model
    i = E.index(name)
    inside = membership(unit_covector(i, E.n), list(u.O), u.sampler(17), u.options.trials, u.options.rtol)
    ev = dict(extra or {})
    if not inside and basis:
        iz = _tester(u, 19)
        for k, xi in enumerate(basis):
            if not iz(xi[i]):
                ev["moved_by"] = {"xi": k + 1, "component": to_text(xi[i])}
                break
    ev["membership"] = inside
    return Verdict(name, kind, inside, ev)


def check_constants_and_originals(u: UioResult, basis: Sequence[VectorField] | None = None) -> list[Verdict]:
    basis = orthogonal_basis(u) if basis is None else basis
    out = [_state_verdict(u, c.name, "constant", basis) for c in u.model.constants]
    for w, J in u.extension.orders.items():
        for l in range(J):
            nm = derivative_name(w, l)
            out.append(_state_verdict(u, nm, "original-ui-derivative", basis, {"original": w, "order": l}))
    return out


def full_report(m0: Model, opts: UioOptions | None = None, normalize: bool = False) -> IdentifiabilityReport:
    u = build_uio(m0, opts)
    try:
        basis = orthogonal_basis(u, normalize)
    except SymbolicEliminationFailed:
        basis = None
    verdicts = check_constants_and_originals(u, basis or [])
    mn = mu_nu(u) if u.m else None
    E = u.model
    tv = {}
    for j in range(1, E.m_w + 1):
        if j <= u.m:
            if basis is None:
                # no symbolic basis: fall back to membership of dw_j over the theta state
                from .codistribution import build_theta_codistribution, theta_membership

                th = build_theta_codistribution(u)
                nm = E.unknown_inputs[j - 1].name
                ok = theta_membership(th, nm, u.sampler(23), u.options.trials)
                tv[nm] = Verdict(nm, "tv-first-m", ok, {"reason": "theta-state membership"})
            else:
                v = check_tv(u, j, basis, mn)
                tv[v.name] = v
        else:
            v = check_tv_excess(u, j)
            tv[v.name] = v
    # original unknown inputs that survive (possibly recombined) as inputs of E
    absorbed = set(u.extension.orders)
    ui_map = u.extension.ui_map
    for w in m0.unknown_inputs:
        if w.name in absorbed or w.name in tv:
            continue
        host = next((k for k, e in ui_map.items() if k != w.name and sp.sympify(e).has(w)), None)
        hv = tv.get(host)
        verdict = Verdict(w.name, "tv-first-m", False, {
            "recombined_as": host,
            "reason": "enters the system only through a combination with other unknown inputs",
            "combination": to_text(ui_map[host]) if host else None,
            "host_identifiable": hv.identifiable if hv else None,
        })
        verdicts.append(verdict)
    verdicts.extend(tv.values())
    return IdentifiabilityReport(
        system=m0.name,
        parameters=verdicts,
        canonic=u.canonic,
        observable=u.observable,
        certified=u.certified,
        uio=u,
        basis=list(basis or []),
        m=u.m,
        mu_nu=mn,
    )


def report_record(rep: IdentifiabilityReport) -> dict:
    rec = uio_record(rep.uio)
    rec["orthogonal_distribution"] = [[to_text(c) for c in xi] for xi in rep.basis]
    if rep.mu_nu is not None:
        rec["mu"] = [[to_text(e) for e in row] for row in rep.mu_nu.mu.tolist()]
        rec["nu"] = [[to_text(e) for e in row] for row in rep.mu_nu.nu.tolist()]
    rec["parameters"] = [
        {"name": v.name, "kind": v.kind, "verdict": v.label, "evidence": _jsonable(v.evidence)}
        for v in rep.parameters
    ]
    return rec


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, sp.Basic):
        return to_text(x)
    return x


def report_text(rep: IdentifiabilityReport) -> str:
    u = rep.uio
    E = u.model
    lines = [
        f"system           {rep.system}",
        f"state of E       [{', '.join(s.name for s in E.state)}]",
        f"unknown inputs   [{', '.join(w.name for w in E.unknown_inputs)}]",
        f"extension        {dict(sorted(u.extension.orders.items())) or 'none'}",
        f"degree m         {u.m} of {E.m_w}" + ("  (canonic)" if u.canonic else "  (not canonic)"),
        "h_tilde          " + "; ".join(to_text(h) for h in u.h_tilde),
        f"rank O           {u.rank} of {E.n}" + ("  (observable)" if u.observable else "  (unobservable)"),
    ]
    if u.override:
        lines.append("generators       override adopted")
    if not u.certified:
        lines.append("WARNING          closure depth exhausted; result not certified")
    for k, xi in enumerate(rep.basis):
        lines.append(f"xi{k + 1:<15d}[{', '.join(to_text(c) for c in xi)}]")
    lines.append("")
    w = max([len(v.name) for v in rep.parameters] + [9])
    lines.append(f"{'parameter':<{w}}  {'kind':<22}  verdict")
    for v in rep.parameters:
        note = ""
        fv = v.evidence.get("first_violation")
        if fv:
            note = f"  (xi{fv['xi']}, alpha={fv['alpha']}: {fv['residual']})"
        lines.append(f"{v.name:<{w}}  {v.kind:<22}  {v.label}{note}")
    return "\n".join(lines) + "\n"
