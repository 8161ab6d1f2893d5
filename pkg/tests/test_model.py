import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from identikit import model_path
from identikit.expr import ParseError
from identikit.model import (
    DimensionMismatch, DuplicateSymbol, Model, ParameterSpec, UndeclaredSymbol, augment_constants,
    derivative_name, load_model, model_to_text, models_equal, parse_model, split_derivative, uie_extend,
)
from identikit.simverify import scenario_inputs, simulate, time_grid

S = sp.symbols
T_U, T_I, V, lam, rho, delta, N, c, eta = S("T_U T_I V lambda rho delta N c eta")

TOY = """
name = toy
states = [x]
unknown_inputs = [w]
dynamics:
    x' = w
outputs:
    y = x
"""


def test_parse_hiv_dimensions():
    m = load_model(model_path("hiv"))
    assert (m.n, m.m_u, m.m_w, m.p) == (8, 0, 1, 2)
    assert [s.name for s in m.state] == ["T_U", "T_I", "V", "lambda", "rho", "delta", "N", "c"]


def test_parse_seiar_dimensions():
    m = load_model(model_path("seiar"))
    assert (m.n, m.m_w, m.p) == (9, 1, 3)
    assert [s.name for s in m.state] == ["S", "E", "I", "A", "R", "mu1", "mu2", "gamma", "p"]


def test_empty_outputs_is_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        parse_model(TOY.replace("outputs:\n    y = x\n", "outputs:\n"))


def test_syntax_error_reports_line():
    bad = TOY.replace("x' = w", "x' = w +* 2")
    with pytest.raises(ParseError) as ei:
        parse_model(bad)
    assert ei.value.line == 6


def test_undeclared_symbol():
    with pytest.raises(UndeclaredSymbol):
        parse_model(TOY.replace("x' = w", "x' = w + k"))


def test_missing_dynamics_row():
    with pytest.raises(DimensionMismatch):
        parse_model(TOY.replace("states = [x]", "states = [x, z]"))


def test_unknown_input_in_output_rejected():
    with pytest.raises(Exception):
        parse_model(TOY.replace("y = x", "y = x + w"))


def _raw_hiv():
    z = sp.S.Zero
    return Model(
        state=(T_U, T_I, V), known_inputs=(), unknown_inputs=(eta,),
        g0=(lam - rho * T_U, -delta * T_I, N * delta * T_I - c * V),
        f=(), g=((-T_U * V, T_U * V, z),), outputs=(T_U + T_I, V),
        params=(lam, rho, delta, N, c), name="hiv",
    )


def test_augment_hiv_matches_stacked_vectors():
    m = augment_constants(_raw_hiv(), [ParameterSpec(s, "constant") for s in (lam, rho, delta, N, c)])
    assert m.n == 8
    z = [0] * 5
    g0 = [lam - rho * T_U, -delta * T_I, N * delta * T_I - c * V, *z]
    g1 = [-T_U * V, T_U * V, 0, *z]
    assert all(sp.expand(a - b) == 0 for a, b in zip(m.g0, g0))
    assert all(sp.expand(a - b) == 0 for a, b in zip(m.g[0], g1))
    parsed = load_model(model_path("hiv"))
    assert models_equal(m, parsed)


def test_augment_empty_is_identity():
    m = _raw_hiv()
    assert augment_constants(m, []) is m


def test_augment_duplicate():
    m = augment_constants(_raw_hiv(), [ParameterSpec(lam, "constant")])
    with pytest.raises(DuplicateSymbol):
        augment_constants(m, [ParameterSpec(lam, "constant")])


def test_augment_round_trip():
    m = augment_constants(_raw_hiv(), [ParameterSpec(s, "constant") for s in (lam, rho, delta, N, c)])
    back = parse_model(model_to_text(m))
    assert models_equal(m, back)


@pytest.mark.parametrize("name", ["hiv", "seiar", "visfm", "toy_two_inputs", "toy_observable"])
def test_bundled_round_trip(name):
    m = load_model(model_path(name))
    back = parse_model(model_to_text(m))
    assert models_equal(m, back)
    assert back.override == m.override or all(sp.expand(a - b) == 0 for a, b in zip(back.override, m.override))


def test_visfm_extension_state():
    m = load_model(model_path("visfm"))
    E, rec = uie_extend(m, {"A_y": 1})
    r, phi, v, alpha, theta, A_y, A_x, A_y1, omega = S("r phi v alpha theta A_y A_x A_y_d1 omega")
    assert [s.name for s in E.state] == ["r", "phi", "v", "alpha", "theta", "A_y"]
    assert [w.name for w in E.unknown_inputs] == ["A_x", "A_y_d1"]
    assert rec.orders == {"A_y": 1}
    g0 = [v * sp.cos(alpha - phi), v / r * sp.sin(alpha - phi), A_y * sp.sin(alpha - theta),
          A_y / v * sp.cos(alpha - theta), 0, 0]
    g1 = [0, 0, sp.cos(alpha - theta), -sp.sin(alpha - theta) / v, 0, 0]
    g2 = [0, 0, 0, 0, 0, 1]
    f1 = [0, 0, 0, 0, 1, 0]
    for got, want in [(E.g0, g0), (E.g[0], g1), (E.g[1], g2), (E.f[0], f1)]:
        assert all(sp.simplify(a - b) == 0 for a, b in zip(got, want))


def test_extend_empty():
    m = load_model(model_path("hiv"))
    E, rec = uie_extend(m, {})
    assert E is m and rec.empty


def test_double_extension_equals_single():
    m = parse_model(TOY)
    a, rec1 = uie_extend(m, {"w": 1})
    a, rec2 = uie_extend(a, {"w_d1": 1})
    b, rec_b = uie_extend(m, {"w": 2})
    assert models_equal(a, b)
    assert rec1.merged(rec2).orders == rec_b.orders == {"w": 2}


def test_extension_order_validated():
    with pytest.raises(ValueError):
        uie_extend(parse_model(TOY), {"w": 0})


@given(st.text(alphabet="abcxyz_", min_size=1, max_size=6).filter(lambda s: not s.endswith("_")), st.integers(0, 6))
def test_derivative_names_invert(name, k):
    assert split_derivative(derivative_name(name, k)) == (name, k)


def test_constants_stay_constant_in_simulation():
    m = load_model(model_path("hiv"))
    x0, u_fn, w_fn = scenario_inputs(m, m.scenario)
    tr = simulate(m, x0, u_fn, w_fn, np.linspace(0, 50, 201))
    assert np.allclose(tr.state[:, 3:], tr.state[0, 3:], rtol=0, atol=1e-12)


def test_extension_preserves_input_output_behaviour():
    m = load_model(model_path("hiv"))
    grid = time_grid(m.scenario)
    x0, u_fn, w_fn = scenario_inputs(m, m.scenario)
    base = simulate(m, x0, u_fn, w_fn, grid)
    E, _ = uie_extend(m, {"eta": 1})
    x0e, u_e, w_e = scenario_inputs(E, m.scenario)
    ext = simulate(E, x0e, u_e, w_e, grid)
    rel = np.max(np.abs(ext.y - base.y), axis=0) / np.max(np.abs(base.y), axis=0)
    assert rel.max() < 1e-6
