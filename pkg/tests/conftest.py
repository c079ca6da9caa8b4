import math
from importlib import resources

import numpy as np
import pytest

from gridshield.grid import Branch, Bus, Grid, GroundTruthState, parse_case


def load_bundled(name):
    text = resources.files("gridshield.cases").joinpath(name).read_text()
    fmt = "json_grid" if name.endswith(".json") else "matpower_subset"
    return parse_case(text, fmt)


def toy_grid(edges, n_bus=None, vm=None, va=None, g=1.0, b=-2.0, b_sh=0.0):
    """Small grid from an edge list; uniform admittance unless overridden."""
    if n_bus is None:
        n_bus = max(max(e[:2]) for e in edges) + 1
    branches = []
    for k, e in enumerate(edges):
        gi = e[2] if len(e) > 2 else g
        bi = e[3] if len(e) > 3 else b
        shi = e[4] if len(e) > 4 else b_sh
        branches.append(Branch(id=k, from_bus=e[0], to_bus=e[1],
                               g=gi, b=bi, b_sh=shi))
    buses = [Bus(id=k, name=str(k)) for k in range(n_bus)]
    grid = Grid(buses=buses, branches=branches)
    if vm is None:
        vm = [1.0] * n_bus
    if va is None:
        va = [0.0] * n_bus
    return grid, GroundTruthState(vm=list(vm), va=list(va))


def random_state(grid, rng, vm_lo=0.95, vm_hi=1.05, angle=0.2):
    vm = rng.uniform(vm_lo, vm_hi, grid.n_buses)
    va = rng.uniform(-angle, angle, grid.n_buses)
    va -= va[grid.ref_bus]
    return GroundTruthState(vm=list(vm), va=list(va))


@pytest.fixture(scope="session")
def case14():
    return load_bundled("case14.m")


@pytest.fixture(scope="session")
def case30():
    return load_bundled("case30.m")


@pytest.fixture(scope="session")
def case118():
    return load_bundled("case118.m")


@pytest.fixture(scope="session")
def case14_json():
    return load_bundled("case14.json")


@pytest.fixture
def path6_grid():
    return toy_grid([(k, k + 1) for k in range(5)])


@pytest.fixture
def star4_grid():
    return toy_grid([(0, k) for k in range(1, 5)])


@pytest.fixture
def triangle_grid():
    return toy_grid([(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240813)
