import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from embercap.lattice import (build_supercell, diamond_conventional, diamond_primitive,
                              make_nv_defect, neighbor_graph)

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

C15_RULES = [
    {"name": "cnn", "neighbors_of": "n", "element": "C"},
    {"name": "c3c_nb", "neighbors_of": "c3c", "element": "C"},
]
C21_RULES = C15_RULES + [{"name": "cnn_nb", "neighbors_of": "cnn", "element": "C", "min_shared": 2}]
C24_RULES = C15_RULES + [{"name": "cnn_nb", "neighbors_of": "cnn", "element": "C", "min_shared": 1}]
C30_RULES = C24_RULES + [{"name": "c3c_nb2", "neighbors_of": "c3c_nb", "element": "C",
                          "min_shared": 2}]
C36_RULES = C30_RULES + [{"name": "cnn_nb2", "neighbors_of": "cnn_nb", "element": "C",
                          "min_shared": 2}]


def nv_cell(prim, reps):
    cell = build_supercell(prim, reps)
    g = neighbor_graph(cell)
    return make_nv_defect(cell, 0, g.neighbors(0)[0], graph=g)


@pytest.fixture(scope="session")
def c62n():
    cell = nv_cell(diamond_conventional(), (2, 2, 2))
    return cell, neighbor_graph(cell)


@pytest.fixture(scope="session")
def c126n():
    cell = nv_cell(diamond_primitive(), (4, 4, 4))
    return cell, neighbor_graph(cell)


@pytest.fixture(scope="session")
def c158n():
    cell = nv_cell(diamond_primitive(), (4, 4, 5))
    return cell, neighbor_graph(cell)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_embedding_problem(seed, max_sites=60, interacting=False, **kw):
    """A randomized half-filled chain or ring split into a contiguous cluster and the rest."""
    from embercap.meanfield import TightBindingModel
    from embercap.oep import build_embedding_problem

    rng = np.random.default_rng(seed)
    n = 2 * int(rng.integers(3, max_sites // 2 + 1))
    ring = bool(rng.integers(2))
    hops = [(i, i + 1, -rng.uniform(0.6, 1.4)) for i in range(n - 1)]
    if ring:
        hops.append((0, n - 1, -rng.uniform(0.6, 1.4)))
    pos = np.zeros((n, 3))
    pos[:, 0] = 1.5 * np.arange(n)
    model = TightBindingModel(rng.normal(0, 0.3, n), hops, n, site_positions=pos,
                              interaction_u=rng.uniform(0.2, 1.0, n) if interacting else None,
                              smearing_width=float(rng.uniform(0.02, 0.2)), name=f"rand{seed}")
    start = int(rng.integers(0, n - 2))
    size = int(rng.integers(2, min(n - 2, 12) + 1))
    cluster = [(start + k) % n for k in range(size)]
    return build_embedding_problem(model, cluster, **kw), rng


def central_difference(fun, v, h=1e-5):
    g = np.zeros_like(v)
    for i in range(len(v)):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (fun(v + e) - fun(v - e)) / (2 * h)
    return g
