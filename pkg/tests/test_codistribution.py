import pytest
import sympy as sp

from identikit import model_path
from identikit.codistribution import (
    OverrideInvalid, UioOptions, build_theta_codistribution, build_uio, non_canonic_residuals, membership,
    theta_membership, uio_record, unit_covector,
)
from identikit.diffgeo import differential, generic_rank, reconstructability_matrix
from identikit.expr import ExprError, is_zero, parse_expr
from identikit.model import load_model, models_equal, parse_model

from .conftest import FIXTURES


def P(text, m):
    return parse_expr(text, m.symbols())


def spans_equal(u, funcs):
    """Mutual membership of two generator sets over the state of u."""
    E = u.model
    other = [differential(f, E.state) for f in funcs]
    s = u.sampler(29)
    return (all(membership(c, list(u.O), s) for c in other)
            and all(membership(c, other, s) for c in u.O))


def test_hiv_uio(hiv):
    u = hiv.uio
    assert models_equal(u.model, hiv.model) and u.extension.empty
    assert u.m == 1 and u.canonic and not u.observable and u.certified
    assert u.rank == 7 and len(u.O) == 7
    assert is_zero(u.h_tilde[0] - P("lambda - rho*T_U - delta*T_I", u.model))
    expected = ["T_U + T_I", "V", "N*delta*T_I - c*V", "lambda - rho*T_U - delta*T_I",
             "c*(V*c - N*T_I*delta) + N*delta*rho*(T_I*delta - lambda + T_U*rho)/(delta - rho)",
             "N*delta/(rho - delta)",
             "c*(V*c^2*delta - V*c^2*rho - N*T_I*c*delta^2 + N*T_I*c*delta*rho + N*T_I*delta^2*rho"
             " + N*T_U*delta*rho^2 - N*lambda*delta*rho)/(rho - delta)"]
    assert spans_equal(u, [P(f, u.model) for f in expected])


def test_seiar_uio(seiar):
    u = seiar.uio
    assert u.extension.empty and u.m == 1 and u.rank == 7 and u.model.n == 9
    assert is_zero(u.h_tilde[0] - P("gamma*p*E - mu1*I", u.model))
    expected = ["I", "A", "S + E + R", "-A*mu2 - E*gamma*(p - 1)", "(1 - p)/p",
             "mu2*(A*mu2 + E*gamma*(p - 1)) + mu1*(1 - p)/p*(E*gamma*p - I*mu1)", "gamma*p*E - mu1*I"]
    assert spans_equal(u, [P(f, u.model) for f in expected])


def test_visfm_uio(visfm):
    u = visfm.uio
    assert [s.name for s in u.model.state] == ["r", "phi", "v", "alpha", "theta", "A_y"]
    assert u.extension.orders == {"A_y": 1}
    assert u.m == 2 and u.rank == 4 and u.override
    E = u.model
    assert is_zero(u.h_tilde[0] - P("v/r*sin(alpha - phi)", E))
    assert is_zero(u.h_tilde[1] - P("A_y*cos(phi - theta)/r", E))


@pytest.mark.parametrize("case", ["hiv", "seiar", "visfm"])
def test_uio_invariants(case, request):
    u = request.getfixturevalue(case).uio
    E = u.model
    assert generic_rank(reconstructability_matrix(E, u.h_tilde), u.sampler(31)) == u.m <= E.m_w
    for h in u.h_tilde:
        assert membership(differential(h, E.state), list(u.O), u.sampler(37))
    for c in u.O:
        assert membership(c, list(u.O), u.sampler(41))


def test_theta_hiv(hiv):
    th = build_theta_codistribution(hiv.uio)
    assert len(th.symbols) == 9 and len(th.generators) == 8 and th.rank == 8
    assert not theta_membership(th, "eta")


def test_theta_toy_observable():
    u = build_uio(load_model(model_path("toy_observable")))
    th = build_theta_codistribution(u)
    assert th.rank == 2 and theta_membership(th, "w")


def test_theta_seiar(seiar):
    th = build_theta_codistribution(seiar.uio)
    assert not theta_membership(th, "beta")
    assert not theta_membership(th, "gamma")
    assert theta_membership(th, "mu1")


def _state_member(u, name):
    E = u.model
    return membership(unit_covector(E.index(name), E.n), list(u.O), u.sampler(43))


def test_membership_hiv(hiv):
    u = hiv.uio
    assert _state_member(u, "lambda") and _state_member(u, "c")
    assert not _state_member(u, "delta") and not _state_member(u, "N")


def test_membership_seiar(seiar):
    assert _state_member(seiar.uio, "mu1")
    assert not _state_member(seiar.uio, "gamma")


def test_membership_dimension_check(hiv):
    with pytest.raises(ValueError):
        membership([1, 0], list(hiv.uio.O))


LEMMA_TOY = """
name = non_canonic_toy
states = [x1, x2]
unknown_inputs = [w1, w2]
dynamics:
    x1' = x2 + w1
    x2' = x2*w1 + w2
outputs:
    y = x1
"""


@pytest.mark.parametrize("text", [LEMMA_TOY, None])
def test_non_canonic_identities_on_non_canonic_toys(text):
    m = parse_model(text) if text else load_model(model_path("toy_two_inputs"))
    u = build_uio(m)
    assert u.m < u.model.m_w and not u.canonic
    res = non_canonic_residuals(u)
    assert res
    for _, _, e in res:
        assert is_zero(e)


def test_non_canonic_recombination_recorded():
    u = build_uio(load_model(model_path("toy_two_inputs")))
    assert [w.name for w in u.model.unknown_inputs] == ["w1_tilde", "w2"]
    w1, w2 = sp.symbols("w1 w2")
    assert sp.expand(u.extension.ui_map["w1_tilde"] - (w1 + w2)) == 0


def test_override_adopted_seiar():
    u = build_uio(load_model(FIXTURES / "seiar_override.model"))
    assert u.override and u.m == 1 and u.rank == 7


def test_override_invalid_dependent():
    m = load_model(FIXTURES / "seiar_override.model")
    bad = m.override + (m.override[0] + m.override[1],)
    from dataclasses import replace

    with pytest.raises(OverrideInvalid, match="dependent"):
        build_uio(replace(m, override=bad))


def test_override_invalid_missing_output():
    m = load_model(FIXTURES / "seiar_override.model")
    from dataclasses import replace

    with pytest.raises(OverrideInvalid, match="not in the span"):
        build_uio(replace(m, override=m.override[1:]))


def test_depth_exhausted_is_flagged(hiv):
    u = build_uio(hiv.model, UioOptions(depth=1))
    assert not u.certified
    with pytest.raises(ExprError):
        build_theta_codistribution(u)


def test_uio_deterministic(hiv):
    a = uio_record(build_uio(hiv.model, UioOptions(seed=3)))
    b = uio_record(build_uio(hiv.model, UioOptions(seed=3)))
    assert a == b
