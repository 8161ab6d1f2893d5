from dataclasses import dataclass
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from identikit import model_path
from identikit.codistribution import build_uio
from identikit.identifiability import full_report, mu_nu, orthogonal_basis
from identikit.model import load_model
from identikit.simverify import base_trajectory

settings.register_profile("identikit", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("identikit")

FIXTURES = Path(__file__).parent / "fixtures"


@dataclass
class Case:
    model: object
    uio: object
    basis: list
    report: object

    @property
    def mn(self):
        return mu_nu(self.uio)


def _case(name):
    m = load_model(model_path(name))
    u = build_uio(m)
    return Case(m, u, orthogonal_basis(u), full_report(m))


@pytest.fixture(scope="session")
def hiv():
    return _case("hiv")


@pytest.fixture(scope="session")
def seiar():
    return _case("seiar")


@pytest.fixture(scope="session")
def visfm():
    return _case("visfm")


@pytest.fixture(scope="session")
def hiv_base(hiv):
    return base_trajectory(hiv.uio)


@pytest.fixture(scope="session")
def seiar_base(seiar):
    return base_trajectory(seiar.uio)


@pytest.fixture(scope="session")
def visfm_base(visfm):
    return base_trajectory(visfm.uio)


HIV_TAUS = (-3.0, -1.0, 0.0, 1.0, 2.25)


@pytest.fixture(scope="session")
def hiv_family(hiv, hiv_base):
    from identikit.flows import integrate_family

    return integrate_family(hiv.uio, hiv.basis[0], hiv_base, HIV_TAUS)


def thin(base, every):
    """Every ``every``-th instant of a trajectory; flows act pointwise in t."""
    from dataclasses import replace

    sl = slice(None, None, every)
    return replace(base, time_grid=base.time_grid[sl], state=base.state[sl], u=base.u[sl],
                   w=base.w[sl], y=base.y[sl])
