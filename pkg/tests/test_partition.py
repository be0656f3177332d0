import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embercap.errors import ValidationError
from embercap.lattice import build_supercell, diamond_conventional, make_nv_defect, neighbor_graph
from embercap.partition import (auxiliary_fragment, cap_selection, component_bonding,
                                dumps_report, nv_seed_sets, partition_report, select_cluster)

from conftest import C15_RULES, C21_RULES, C24_RULES, C30_RULES, C36_RULES

CAP_VALENCE = {"F": 1, "O": 2, "B": 3}


def carve(cell_graph, rules, charge=(-1, 3)):
    cell, graph = cell_graph
    sel = select_cluster(cell, graph, nv_seed_sets(cell, graph), rules)
    cl, env = cap_selection(cell, graph, sel, charge)
    return sel, cl, env, auxiliary_fragment(cl, env, graph)


@pytest.fixture(scope="module")
def c15(request):
    return carve(request.getfixturevalue("c62n"), C15_RULES)


def test_c15n_selection(c15, c62n):
    sel, cl, env, _ = c15
    assert len(sel.cluster_atoms) == 16 and len(sel.environment_atoms) == 47
    assert sel.cluster_atoms | sel.environment_atoms == frozenset(range(len(c62n[0])))
    assert cl.formula == "C15NF12O12"
    assert env.formula == "C47B12"
    assert (cl.total_charge, cl.spin_multiplicity) == (-1, 3)
    assert (env.total_charge, env.spin_multiplicity) == (0, 1)


def test_c15n_auxiliary_units(c15, c62n):
    _, _, env, aux = c15
    assert aux.formula == "F12O12B12"
    assert sorted(aux.component_formulas()) == ["F3O3B3"] * 4
    assert all(aux.closed_shell)
    nb = component_bonding(aux, c62n[1].cutoff, env.lattice)
    for atom, counts in zip(aux.atoms, nb):
        if atom[0] == "B":
            assert counts == {"O": 2, "F": 1}


def test_cap_provenance_is_complementary(c15):
    sel, cl, env, _ = c15
    assert all(p in sel.environment_atoms for _, _, p in cl.cap_atoms)
    assert all(p in sel.cluster_atoms for _, _, p in env.cap_atoms)


def test_cap_element_follows_sharing_count(c15, c62n):
    sel, cl, env, _ = c15
    graph = c62n[1]
    for el, _, site in env.cap_atoms:
        shared = sum(1 for j, _, _ in graph.adjacency[site] if j in sel.environment_atoms)
        assert {1: "F", 2: "O", 3: "B"}[shared] == el


def test_cap_bond_conservation(c15):
    _, cl, env, _ = c15
    # each severed bond is healed exactly once on each side
    n = len(cl.severed_bonds)
    assert n == len(env.severed_bonds) == 36
    assert sum(CAP_VALENCE[c[0]] for c in cl.cap_atoms) == n
    assert sum(CAP_VALENCE[c[0]] for c in env.cap_atoms) == n


def test_caps_sit_on_missing_sites(c15, c62n):
    cell, _ = c62n
    _, cl, _, _ = c15
    lat = cell.lattice
    for _, xyz, site in cl.cap_atoms:
        d = (xyz - cell.cart[site]) @ np.linalg.inv(lat)
        assert np.allclose(d, np.round(d), atol=1e-9)


def test_c21n_family(c126n):
    _, cl, _, _ = carve(c126n, C21_RULES)
    assert cl.formula == "C21NF18O9"


@pytest.mark.parametrize("rules, formula", [
    (C24_RULES, "C24NF18O12"),
    (C30_RULES, "C30NF24O9"),
    (C36_RULES, "C36NF30O6"),
])
def test_c158n_family(c158n, rules, formula):
    _, cl, _, aux = carve(c158n, rules)
    assert cl.formula == formula
    assert all(aux.closed_shell)


def test_zero_growth_keeps_seeds(c62n):
    cell, graph = c62n
    seeds = nv_seed_sets(cell, graph)
    sel = select_cluster(cell, graph, seeds)
    assert sel.cluster_atoms == frozenset(i for v in seeds.values() for i in v)
    assert len(sel.cluster_atoms) == 4


def test_seed_errors(c62n):
    cell, graph = c62n
    with pytest.raises(ValidationError, match="empty"):
        select_cluster(cell, graph, [])
    with pytest.raises(ValidationError, match="out of range"):
        select_cluster(cell, graph, [0, 999])
    with pytest.raises(ValidationError, match="unknown set"):
        select_cluster(cell, graph, [0], [{"name": "x", "neighbors_of": "nothing"}])


def test_tetravalent_cap_refused(c62n):
    cell, graph = c62n
    # a carbon whose four neighbours are all in the cluster leaves a 4-shared hole
    centre = next(i for i in range(len(cell)) if graph.degree(i) == 4
                  and all(graph.degree(j) == 4 for j in graph.neighbors(i)))
    sel = select_cluster(cell, graph, graph.neighbors(centre))
    with pytest.raises(ValidationError, match=f"include site {centre}"):
        cap_selection(cell, graph, sel)


def test_empty_cap_sets_give_empty_auxiliary():
    from embercap.lattice import CrystalCell, neighbor_graph

    cell = CrystalCell(10 * np.eye(3), ["C", "C"], [[0, 0, 0], [0.5, 0.5, 0.5]])
    graph = neighbor_graph(cell)
    sel = select_cluster(cell, graph, [0])
    cl, env = cap_selection(cell, graph, sel)
    aux = auxiliary_fragment(cl, env, graph)
    assert aux.atoms == () and aux.connected_components == ()


def test_report_is_versioned_json(c15):
    _, cl, env, aux = c15
    rep = partition_report(cl, env, aux, csm=1e-5, label="C15N")
    doc = json.loads(dumps_report(rep))
    assert doc["schema"] == "embercap.partition.v1"
    assert doc["auxiliary"]["n_components"] == 4
    assert doc["symmetry"]["symmetric"] is True
    assert dumps_report(rep) == dumps_report(partition_report(cl, env, aux, csm=1e-5,
                                                              label="C15N"))


def test_xyz_carries_provenance(c15):
    _, cl, _, _ = c15
    text = cl.to_xyz()
    lines = text.splitlines()
    assert int(lines[0]) == 40
    assert sum("cap:F<-site" in ln for ln in lines) == 12


def _relabel(cell, graph, perm):
    from embercap.lattice import CrystalCell, neighbor_graph

    inv = np.argsort(perm)
    new = CrystalCell(cell.lattice, [cell.symbols[p] for p in perm], cell.frac[perm])
    return new, neighbor_graph(new), inv


@settings(max_examples=5)
@given(st.randoms(use_true_random=False))
def test_relabeling_invariance(c62n, rand):
    cell, graph = c62n
    perm = list(range(len(cell)))
    rand.shuffle(perm)
    perm = np.array(perm)
    new, g2, _ = _relabel(cell, graph, perm)
    _, cl0, env0, aux0 = carve((cell, graph), C15_RULES)
    _, cl1, env1, aux1 = carve((new, g2), C15_RULES)
    assert cl1.formula == cl0.formula and env1.formula == env0.formula
    # same cap sites, mapped through the permutation
    old_caps = sorted((el, int(p)) for el, _, p in cl0.cap_atoms)
    new_caps = sorted((el, int(perm[p])) for el, _, p in cl1.cap_atoms)
    assert old_caps == new_caps
    assert sorted(aux1.component_formulas()) == sorted(aux0.component_formulas())


def test_bond_scale_moves_caps_inward(c62n):
    cell, graph = c62n
    sel = select_cluster(cell, graph, nv_seed_sets(cell, graph), C15_RULES)
    plain, _ = cap_selection(cell, graph, sel)
    scaled, _ = cap_selection(cell, graph, sel, bond_scale={"F": 0.9})
    centre = np.mean([a[1] for a in plain.native_atoms], axis=0)
    for (el, a, _), (_, b, _) in zip(plain.cap_atoms, scaled.cap_atoms):
        if el == "F":
            assert np.linalg.norm(b - centre) < np.linalg.norm(a - centre)
        else:
            assert np.array_equal(a, b)


@pytest.mark.parametrize("vac, k", [(0, 1), (17, 0), (40, 3)])
def test_defect_pair_choice_does_not_matter(vac, k):
    base = build_supercell(diamond_conventional(), (2, 2, 2))
    g = neighbor_graph(base)
    cell = make_nv_defect(base, vac, g.neighbors(vac)[k], graph=g)
    _, cl, env, aux = carve((cell, neighbor_graph(cell)), C15_RULES)
    assert (cl.formula, env.formula) == ("C15NF12O12", "C47B12")
    assert sorted(aux.component_formulas()) == ["F3O3B3"] * 4
