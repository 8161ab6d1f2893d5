"""Acceptance criteria, one test each. Every test prints a single
``ACCEPTANCE <k> PASS|FAIL`` line (visible even without ``-s``)."""
import json
import math
import time
from dataclasses import replace

import numpy as np
import sympy as sp

from identikit import model_path
from identikit.cli import main
from identikit.codistribution import build_theta_codistribution, build_uio, non_canonic_residuals, theta_membership
from identikit.diffgeo import lie
from identikit.expr import DEFAULT_BOX, TAU, diff, is_zero
from identikit.flows import chi, closed_form, evaluate_closed_form, flow_point, integrate_family, probe_family
from identikit.identifiability import condition_residual, full_report, mu_nu, xi_coefficients
from identikit.model import load_model, parse_model
from identikit.simverify import base_trajectory, verify_family

from .conftest import thin
from .random_models import random_models

HIV_DATA = {"T_U": 600.0, "T_I": 0.0, "V": 1e5, "lambda": 36.0, "rho": 0.108, "delta": 0.5, "N": 1000.0, "c": 3.0}


class Criterion:
    def __init__(self, k, title):
        self.k, self.title, self.checks = k, title, []

    def check(self, label, ok, detail=""):
        self.checks.append((label, bool(ok), detail))
        return bool(ok)

    def finish(self, capsys):
        ok = all(c[1] for c in self.checks)
        failed = [f"{c[0]} ({c[2]})" if c[2] else c[0] for c in self.checks if not c[1]]
        line = f"ACCEPTANCE {self.k} {'PASS' if ok else 'FAIL'}  {self.title}"
        line += f"  [{len(self.checks)} checks]" if ok else "  failed: " + "; ".join(failed)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line


def col_rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    axes = tuple(range(b.ndim - 1))
    scale = np.max(np.abs(b), axis=axes)
    return float(np.max(np.max(np.abs(a - b), axis=axes) / np.where(scale > 0, scale, 1.0)))


def _verdicts(rep):
    return {v.name: v.identifiable for v in rep.parameters}


def test_criterion_1_hiv_pipeline(capsys):
    c = Criterion(1, "HIV analysis: rank 7, m=1, canonic, unobservable, verdicts, < 30 s")
    t0 = time.perf_counter()
    rep = full_report(load_model(model_path("hiv")))
    elapsed = time.perf_counter() - t0
    u = rep.uio
    c.check("rank(O)=7", u.rank == 7, u.rank)
    c.check("m=1", u.m == 1, u.m)
    c.check("canonic", rep.canonic)
    c.check("unobservable", not rep.observable)
    want = {"lambda": True, "rho": True, "c": True, "delta": False, "N": False, "eta": False}
    c.check("verdicts", _verdicts(rep) == want, _verdicts(rep))
    c.check("runtime < 30 s", elapsed < 30, f"{elapsed:.1f} s")
    c.finish(capsys)


def test_criterion_2_hiv_family_numbers(capsys, hiv, hiv_base):
    c = Criterion(2, "HIV family numbers from the flow and from the closed form")
    d, r = HIV_DATA["delta"], HIV_DATA["rho"]
    tau_star = math.log(d / (d - r)) / r
    c.check("tau* = 2.2532 +- 1e-3", abs(tau_star - 2.2532) < 1e-3, tau_star)
    near = tau_star - 1e-6
    base = thin(hiv_base, 20)
    taus = [-3.0, 0.0, near]
    fam = integrate_family(hiv.uio, hiv.basis[0], base, taus)
    cf = evaluate_closed_form(closed_form("hiv"), base, taus)
    for src, f in (("flow", fam), ("closed form", cf)):
        n3, n_star, d3 = f.column("N", -3)[0], f.column("N", near)[0], f.column("delta", -3)[0]
        c.check(f"{src}: N'(-3) = 723 +- 1", abs(n3 - 723) <= 1, n3)
        c.check(f"{src}: N'(tau*-eps) = 1276 +- 2", abs(n_star - 1276) <= 2, n_star)
        c.check(f"{src}: delta'(-3) = 0.25 +- 0.005", abs(d3 - 0.25) <= 0.005, d3)
    pairs = (("N", -3), ("N", near), ("delta", -3))
    for name, tau in pairs:
        a, b = fam.column(name, tau), cf.column(name, tau)
        err = float(np.max(np.abs(a - b) / np.abs(b)))
        c.check(f"{name}'({tau:.6g}) flow vs closed form within 1e-6", err < 1e-6, f"{err:.2e}")
    # the whole family on the admissible grid, every component
    grid = np.round(np.arange(-3, 2.2501, 0.25), 10)
    fam = integrate_family(hiv.uio, hiv.basis[0], base, grid)
    cf = evaluate_closed_form(closed_form("hiv"), base, grid)
    err = max(col_rel(fam.x_prime, cf.x_prime), col_rel(fam.w_prime, cf.w_prime))
    c.check("all components agree on tau in [-3, 2.25] within 1e-6", err < 1e-6, f"{err:.2e}")
    c.finish(capsys)


def test_criterion_3_hiv_indistinguishability(capsys, hiv, hiv_base, hiv_family):
    c = Criterion(3, "HIV family verifies at 1e-5; 1% delta' perturbation fails")
    out = verify_family(hiv.uio.model, hiv_base, hiv_family, tol=1e-5)
    for e in out.per_tau:
        if e["tau"] != 0:
            c.check(f"tau={e['tau']:g} passes", e["passed"], e.get("max_rel_dev"))
    x = hiv_family.x_prime.copy()
    x[:, :, hiv_family.state_names.index("delta")] *= 1.01
    bad = verify_family(hiv.uio.model, hiv_base, replace(hiv_family, x_prime=x, valid=None), tol=1e-5)
    c.check("negative control fails", not bad.passed, bad.max_rel_dev)
    c.finish(capsys)


def test_criterion_4_seiar_pipeline(capsys, seiar, seiar_base):
    c = Criterion(4, "SEIAR analysis, both family sets match closed forms and verify")
    rep = seiar.report
    c.check("rank(O)=7", rep.uio.rank == 7, rep.uio.rank)
    c.check("m=1", rep.m == 1, rep.m)
    v = _verdicts(rep)
    c.check("mu1, mu2, p identifiable", v["mu1"] and v["mu2"] and v["p"], v)
    c.check("gamma, beta unidentifiable", not v["gamma"] and not v["beta"], v)
    taus = [-0.25, -0.1, 0, 0.25, 0.5]
    for key, gen in (("seiar-set1", 0), ("seiar-set2", 1)):
        fam = integrate_family(seiar.uio, seiar.basis[gen], seiar_base, taus)
        cf = evaluate_closed_form(closed_form(key), seiar_base, taus)
        err = max(col_rel(fam.x_prime, cf.x_prime), col_rel(fam.w_prime, cf.w_prime))
        c.check(f"{key} flow = closed form within 1e-6", err < 1e-6, f"{err:.2e}")
        out = verify_family(seiar.uio.model, seiar_base, fam)
        c.check(f"{key} verifies", out.passed, out.max_rel_dev)
    S, beta, gamma = sp.symbols("S beta gamma")
    c.check("beta' = beta S/(S + tau)", is_zero(closed_form("seiar-set1").components["beta"] - beta * S / (S + TAU)))
    c.check("gamma' = gamma e^tau", is_zero(closed_form("seiar-set2").components["gamma"] - gamma * sp.exp(TAU)))
    c.finish(capsys)


def test_criterion_5_visfm_pipeline(capsys, visfm, visfm_base):
    c = Criterion(5, "VISFM: A_y absorbed, m=2, rank 4, residuals -1, e^tau scale family")
    u = visfm.uio
    c.check("6-dim state with A_y", u.model.n == 6 and "A_y" in [s.name for s in u.model.state], u.model.state)
    c.check("m=2", u.m == 2, u.m)
    c.check("rank(O)=4", u.rank == 4, u.rank)
    mn = mu_nu(u)
    xc = xi_coefficients(u, visfm.basis[1])
    r11 = condition_residual(mn, xc, 1, 1)
    r22 = condition_residual(mn, xc, 2, 2)
    c.check("residual -1 at (alpha=1, j=1)", is_zero(r11 + 1), r11)
    c.check("residual -1 at (alpha=2, j=2)", is_zero(r22 + 1), r22)
    taus = [-1, -0.5, 0, 0.5, 1]
    fam = integrate_family(u, visfm.basis[1], visfm_base, taus)
    err = 0.0
    for k, tau in enumerate(taus):
        for name in ("r", "v", "A_y", "A_x", "A_y_d1"):
            b = visfm_base.column(name)
            err = max(err, np.max(np.abs(fam.column(name, tau) - math.exp(tau) * b)) / np.max(np.abs(b)))
        for name in ("phi", "alpha", "theta"):
            b = visfm_base.column(name)
            err = max(err, np.max(np.abs(fam.column(name, tau) - b)) / np.max(np.abs(b)))
    c.check("family = e^tau scale transform within 1e-8", err < 1e-8, f"{err:.2e}")
    c.finish(capsys)


def _fd_check(exprs, points, rng):
    """Worst |diff - central difference| / (1e-5 (1 + |diff|)). The difference
    quotient (step 1e-6) is evaluated in 40-digit arithmetic so that
    cancellation near poles does not pollute the oracle."""
    import mpmath

    worst = 0.0
    h = mpmath.mpf("1e-6")
    with mpmath.workdps(40):
        for e in exprs:
            free = sorted(e.free_symbols, key=lambda s: s.name)
            f = sp.lambdify(free, e, "mpmath")
            for s in free:
                d = sp.lambdify(free, diff(e, s), "numpy")
                P = rng.uniform(*DEFAULT_BOX, size=(len(free), points))
                exact = np.broadcast_to(d(*P), (points,))
                k = free.index(s)
                for j in range(points):
                    if not np.isfinite(exact[j]):
                        continue
                    x = [mpmath.mpf(float(v)) for v in P[:, j]]
                    xp, xm = list(x), list(x)
                    xp[k] += h
                    xm[k] -= h
                    num = float((f(*xp) - f(*xm)) / (2 * h))
                    worst = max(worst, abs(exact[j] - num) / (1e-5 * (1 + abs(exact[j]))))
    return worst


def test_criterion_6_property_suites(capsys, hiv, seiar, visfm, hiv_base):
    c = Criterion(6, "property suites: diff, mu nu = I, non-canonic identities, cross-oracle, group law, conservation")
    rng = np.random.default_rng(0)
    exprs = []
    for case in (hiv, seiar, visfm):
        u = case.uio
        exprs += list(u.h_tilde) + list(mu_nu(u).nu) + chi(u, case.basis[0])
        exprs += [lie(u.model.g[0], h, u.model.state) for h in u.h_tilde]
    ratio = _fd_check(exprs, 1000, rng)
    c.check("diff vs central differences at 1000 points", ratio <= 1.0, f"worst/allowed={ratio:.2e}")
    for case in (hiv, seiar, visfm):
        mn = mu_nu(case.uio)
        prod = mn.mu * mn.nu
        ok = all(is_zero(prod[i, j] - (1 if i == j else 0)) for i in range(prod.rows) for j in range(prod.cols))
        c.check(f"mu nu = I ({case.model.name})", ok)
    toy = parse_model("states = [x1, x2]\nunknown_inputs = [w1, w2]\ndynamics:\n"
                      "    x1' = x2 + w1\n    x2' = x2*w1 + w2\noutputs:\n    y = x1\n")
    ut = build_uio(toy)
    res = non_canonic_residuals(ut)
    c.check("non-canonic identities on a non-canonic toy", not ut.canonic and res and all(is_zero(e) for _, _, e in res))
    mismatches = 0
    reports = [case.report for case in (hiv, seiar, visfm)] + [full_report(m) for m in random_models(20)]
    for rep in reports:
        u = rep.uio
        th = build_theta_codistribution(u)
        for w in u.model.unknown_inputs[: u.m]:
            mismatches += rep.verdict(w.name).identifiable != theta_membership(th, w.name, u.sampler(23))
    c.check("theta-membership = condition verdicts on 3 case studies + 20 random models", mismatches == 0, mismatches)
    worst = 0.0
    for case, gen, pts in ((hiv, 0, [(10, -1.0, 0.7), (2000, 0.5, -1.2)]), (visfm, 1, [(5, 0.3, 0.4)]),
                           (visfm, 0, [(50, -0.8, 0.6)])):
        u, xi = case.uio, case.basis[gen]
        b = hiv_base if case is hiv else base_trajectory(u)
        for i, t1, t2 in pts:
            uu = b.u[i] if b.u.shape[1] else ()
            p1 = flow_point(u, xi, b.state[i], b.w[i], b.time_grid[i], t1, uu)
            p12 = flow_point(u, xi, p1[: u.model.n], p1[u.model.n:], b.time_grid[i], t2, uu)
            direct = flow_point(u, xi, b.state[i], b.w[i], b.time_grid[i], t1 + t2, uu)
            worst = max(worst, float(np.max(np.abs(p12 - direct) / np.maximum(np.abs(direct), 1e-12 * np.abs(direct).max()))))
    c.check("group law within 1e-8", worst < 1e-8, f"{worst:.2e}")
    sb = base_trajectory(seiar.uio)
    total = sum(sb.column(n) for n in ("S", "E", "I", "A", "R"))
    drift = float(np.max(np.abs(total - total[0])) / total[0])
    c.check("SEIAR population conserved within 1e-9", drift < 1e-9, f"{drift:.2e}")
    c.finish(capsys)


def test_criterion_7_minimal_information_probe(capsys, hiv, hiv_base, hiv_family):
    c = Criterion(7, "one extra measurement of T_U at a single t* recovers tau")
    i = int(np.argmin(np.abs(hiv_base.time_grid - 50)))
    meas = hiv_family.column("T_U", 1.0)[i]
    res = probe_family(hiv.uio, hiv.basis[0], hiv_base, sp.Symbol("T_U"), 50.0, meas, (-3, 2.2))
    c.check("tau recovered within 1e-6", abs(res.tau - 1.0) < 1e-6, res.tau)
    c.check("single root", len(res.roots) == 1, res.roots)
    c.check("delta disambiguated", abs(res.parameters["delta"] - hiv_family.column("delta", 1.0)[i]) < 1e-8)
    c.finish(capsys)


def test_criterion_8_determinism(capsys, tmp_path):
    c = Criterion(8, "same seed, byte-identical reports")
    for d in ("a", "b"):
        for name in ("hiv", "seiar", "visfm"):
            assert main(["analyze", name, "--seed", "5", "--out", str(tmp_path / d / name)]) == 0
        assert main(["family", "visfm", "--tau", "0.5", "--seed", "5", "--out", str(tmp_path / d / "visfm")]) == 0
    for name in ("hiv", "seiar", "visfm"):
        a = (tmp_path / "a" / name / "report.json").read_bytes()
        b = (tmp_path / "b" / name / "report.json").read_bytes()
        c.check(f"{name} report.json identical", a == b)
        c.check(f"{name} report.txt identical", (tmp_path / "a" / name / "report.txt").read_bytes()
                == (tmp_path / "b" / name / "report.txt").read_bytes())
    a = (tmp_path / "a" / "visfm" / "family.json").read_bytes()
    c.check("visfm family.json identical", a == (tmp_path / "b" / "visfm" / "family.json").read_bytes())
    c.check("seed recorded", json.loads((tmp_path / "a" / "hiv" / "report.json").read_text())["seed"] == 5)
    c.finish(capsys)
