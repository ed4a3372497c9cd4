"""Shared fixtures: meshes are expensive, so the big ones are session-scoped."""

import numpy as np
import pytest

from dwreuler.gasdynamics import GAMMA, FlowConfig, state_from_primitive
from dwreuler.mesh import FARFIELD, WALL, generate_airfoil_mesh


@pytest.fixture(scope="session")
def naca3k():
    return generate_airfoil_mesh("0012", farfield_radius=40.0, target_cells=3000)


@pytest.fixture(scope="session")
def naca3k_sym():
    return generate_airfoil_mesh(
        "0012", farfield_radius=40.0, target_cells=3000, symmetric=True
    )


@pytest.fixture(scope="session")
def naca400():
    return generate_airfoil_mesh("0012", farfield_radius=40.0, target_cells=400)


@pytest.fixture(scope="session")
def flow05():
    return FlowConfig(mach_inf=0.5, aoa_deg=0.0)


@pytest.fixture(scope="session")
def annulus3k(naca3k):
    # same triangulation with the wall ring handed to the far-field condition,
    # so the free stream is an exact solution
    return naca3k.retagged({WALL: FARFIELD})


def random_states(rng, m, vmax=0.9, gamma=GAMMA):
    """Admissible conservative states with comfortable positivity margins."""
    rho = 0.5 + rng.random(m)
    p = 0.5 + rng.random(m)
    vx = vmax * (2.0 * rng.random(m) - 1.0)
    vy = vmax * (2.0 * rng.random(m) - 1.0)
    return state_from_primitive(rho, vx, vy, p, gamma)


def random_normals(rng, m):
    ang = 2.0 * np.pi * rng.random(m)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)
