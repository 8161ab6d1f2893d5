"""Families from a numerically evaluated generator.

Compares the numeric mode (null space of the codistribution evaluated at
each point, pinned along the base trajectory) with the symbolic basis, and
shows that a state-dependent rescaling of a valid generator is rejected by
the re-simulation check.

    python scripts/numeric_generator.py
"""
import argparse
from dataclasses import dataclass, field

import sympy as sp

from identikit import model_path
from identikit.codistribution import build_uio
from identikit.diffgeo import VectorField
from identikit.flows import FlowField, integrate_family
from identikit.identifiability import orthogonal_basis
from identikit.model import load_model
from identikit.simverify import base_trajectory, verify_family


@dataclass
class Config:
    models: list = field(default_factory=lambda: ["hiv", "seiar", "visfm"])
    tau: float = 0.5


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--tau", type=float, default=Config.tau)
    a = p.parse_args(argv)
    cfg = Config(tau=a.tau)
    for name in cfg.models:
        u = build_uio(load_model(model_path(name)))
        base = base_trajectory(u)
        field_ = FlowField(u, None, "numeric")
        score = field_.select_pins(base)
        cols, logs, _ = field_.pins
        pins = [("log " if lg else "") + u.model.state[c].name for c, lg in zip(cols, logs)]
        taus = [-cfg.tau, 0.0, cfg.tau]
        fam = integrate_family(u, None, base, taus, mode="numeric")
        out = verify_family(u.model, base, fam)
        print(f"{name:<6} pins {pins} (linearized residual {score:.1e}): "
              f"verify {'pass' if out.passed else 'FAIL'} ({out.max_rel_dev:.1e})")

    u = build_uio(load_model(model_path("visfm")))
    base = base_trajectory(u)
    xi = orthogonal_basis(u)[1]
    r = u.model.state[0]
    # r*xi2 has dr/dtau = r^2 and leaves the domain at tau = 1/r, so stay short of that
    for label, comps in (("2*xi2", [2 * c for c in xi]), ("r*xi2", [sp.expand(r * c) for c in xi])):
        fam = integrate_family(u, VectorField(tuple(comps), label), base, [0.0, 0.005])
        out = verify_family(u.model, base, fam)
        print(f"visfm {label}: verify {'pass' if out.passed else 'FAIL'} ({out.max_rel_dev:.1e})")


if __name__ == "__main__":
    main()
