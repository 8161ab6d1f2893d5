"""Analyse the bundled models and check their families end to end.

For each model: verdict table, orthogonal-distribution basis, the flow of
each generator against its closed form (where one is registered) and the
re-simulation check.

    python scripts/case_studies.py            # hiv, seiar, visfm
    python scripts/case_studies.py seiar
"""
import argparse
import time
from dataclasses import dataclass, field

import numpy as np

from identikit import model_path
from identikit.flows import closed_form, evaluate_closed_form, integrate_family
from identikit.identifiability import full_report, report_text
from identikit.model import load_model
from identikit.simverify import base_trajectory, verify_family

# generator index (0-based) -> closed-form key
CLOSED = {"hiv": {0: "hiv"}, "seiar": {0: "seiar-set1", 1: "seiar-set2"}, "visfm": {1: "visfm"}}


@dataclass
class Config:
    models: list = field(default_factory=lambda: ["hiv", "seiar", "visfm"])
    tol: float = 1e-5


def rel(a, b):
    axes = tuple(range(b.ndim - 1))
    scale = np.max(np.abs(b), axis=axes)
    return float(np.max(np.max(np.abs(a - b), axis=axes) / np.where(scale > 0, scale, 1.0)))


def study(name: str, cfg: Config) -> bool:
    t0 = time.perf_counter()
    m = load_model(model_path(name))
    rep = full_report(m)
    print(report_text(rep))
    print(f"analysis took {time.perf_counter() - t0:.1f} s")
    base = base_trajectory(rep.uio)
    taus = sorted(set(m.scenario.tau) | {0.0})
    ok = True
    for k, xi in enumerate(rep.basis):
        fam = integrate_family(rep.uio, xi, base, taus)
        out = verify_family(rep.uio.model, base, fam, cfg.tol)
        line = f"  xi{k + 1}: verify {'pass' if out.passed else 'FAIL'} ({out.max_rel_dev:.1e})"
        key = CLOSED.get(name, {}).get(k)
        if key:
            cf = evaluate_closed_form(closed_form(key), base, taus)
            err = max(rel(fam.x_prime, cf.x_prime), rel(fam.w_prime, cf.w_prime))
            line += f", closed form {key}: {err:.1e}"
        print(line)
        ok &= out.passed
    return ok


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("models", nargs="*", default=Config().models)
    p.add_argument("--tol", type=float, default=Config.tol)
    a = p.parse_args(argv)
    cfg = Config(models=a.models, tol=a.tol)
    results = {n: study(n, cfg) for n in cfg.models}
    print("\n" + "  ".join(f"{n}: {'ok' if v else 'FAILED'}" for n, v in results.items()))
    return 0 if all(results.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
