"""HIV viral-dynamics family: the headline numbers and plot-ready curves.

Writes eta'(t, tau), T_U'(t, tau) and T_I'(t, tau) on a tau grid as CSV,
prints tau*, N'(-3), N'(tau* - eps) and delta'(-3) from both the flow and the
closed form, and re-simulates every member.

    python scripts/hiv_family.py --out hiv-family
"""
import argparse
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from identikit import model_path
from identikit.codistribution import build_uio
from identikit.flows import closed_form, evaluate_closed_form, integrate_family
from identikit.identifiability import orthogonal_basis
from identikit.model import load_model
from identikit.simverify import base_trajectory, verify_family


@dataclass
class Config:
    out: Path = Path("hiv-family")
    tau_lo: float = -3.0
    tau_hi: float = 2.25
    tau_step: float = 0.25
    eps: float = 1e-6
    verify: bool = True


def run(cfg: Config) -> dict:
    m = load_model(model_path("hiv"))
    u = build_uio(m)
    xi = orthogonal_basis(u)[0]
    base = base_trajectory(u)
    delta, rho = m.scenario.initial["delta"], m.scenario.initial["rho"]
    tau_star = math.log(delta / (delta - rho)) / rho
    taus = sorted(set(np.round(np.arange(cfg.tau_lo, cfg.tau_hi + 1e-9, cfg.tau_step), 10)) | {0.0})

    fam = integrate_family(u, xi, base, taus)
    edge = integrate_family(u, xi, base, [0.0, tau_star - cfg.eps])
    cf = evaluate_closed_form(closed_form("hiv"), base, taus + [tau_star - cfg.eps])
    nums = {
        "tau*": tau_star,
        "N'(-3) flow": fam.column("N", -3)[0],
        "N'(-3) closed": cf.column("N", -3)[0],
        "N'(tau*-eps) flow": edge.column("N", tau_star - cfg.eps)[0],
        "N'(tau*-eps) closed": cf.column("N", tau_star - cfg.eps)[0],
        "delta'(-3) flow": fam.column("delta", -3)[0],
        "delta'(-3) closed": cf.column("delta", -3)[0],
    }
    for k, v in nums.items():
        print(f"{k:<22}{v:.6f}")

    cfg.out.mkdir(parents=True, exist_ok=True)
    for name in ("eta", "T_U", "T_I"):
        path = cfg.out / f"{name}_prime.csv"
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", *[f"tau={t:g}" for t in fam.tau_grid]])
            cols = np.stack([fam.column(name, t) for t in fam.tau_grid], axis=1)
            for t, row in zip(fam.time_grid, cols):
                wr.writerow([repr(float(t)), *[repr(float(v)) for v in row]])
        print(f"wrote {path}")

    if cfg.verify:
        out = verify_family(u.model, base, fam)
        print(f"verification {'passed' if out.passed else 'FAILED'}: max rel output deviation {out.max_rel_dev:.2e}")
    return nums


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", type=Path, default=Config.out)
    p.add_argument("--tau-step", type=float, default=Config.tau_step)
    p.add_argument("--no-verify", action="store_true")
    a = p.parse_args(argv)
    run(Config(out=a.out, tau_step=a.tau_step, verify=not a.no_verify))


if __name__ == "__main__":
    main()
