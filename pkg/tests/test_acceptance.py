"""End-to-end acceptance checks, one test per criterion with its runtime budget.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line.  Run alone with
``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from embercap.errors import EmbercapError, ParseError  # noqa: E402
from embercap.field import ScalarField, SiteVector, read_density_file, write_density_file  # noqa: E402
from embercap.lattice import (CrystalCell, build_supercell, diamond_conventional,  # noqa: E402
                              diamond_primitive, emit_structure, make_nv_defect, neighbor_graph,
                              parse_structure)
from embercap.manybody import (ActiveSpace, ci_report, excitation_energies, fci_solve,  # noqa: E402
                               make_sector, parse_fcidump, sector_hamiltonian, write_fcidump)
from embercap.meanfield import parse_model  # noqa: E402
from embercap.nvmodel import (build_nv_active_space, classify_states, nv_spectrum,  # noqa: E402
                              parse_params, reference_params, term_energies)
from embercap.oep import optimize_vemb, wu_yang_value_and_gradient  # noqa: E402
from embercap.partition import (auxiliary_fragment, cap_selection, component_bonding,  # noqa: E402
                                nv_seed_sets, select_cluster)
from embercap.symmetry import symmetry_detail, symmetry_measure  # noqa: E402
from embercap.workflow import embedded_cluster_spectrum, ring_window, ssh_defect_ring  # noqa: E402
from embercap.oep import build_embedding_problem  # noqa: E402

from conftest import (C15_RULES, C21_RULES, C24_RULES, C30_RULES, C36_RULES,  # noqa: E402
                      central_difference, random_embedding_problem)
from oracles.grid_search import grid_maximum  # noqa: E402
from oracles.second_quantization import fock_hamiltonian, sector_block  # noqa: E402

PERMS = [(0, 1, 2, 3), (1, 0, 2, 3), (0, 1, 3, 2), (1, 0, 3, 2),
         (2, 3, 0, 1), (3, 2, 0, 1), (2, 3, 1, 0), (3, 2, 1, 0)]


def verdict(number, title, check, budget, capsys=None):
    """Run ``check``, print one PASS/FAIL line, and fail on error or overrun."""
    start = time.perf_counter()
    error = None
    try:
        detail = check()
    except AssertionError as exc:
        detail, error = str(exc) or "assertion failed", exc
    elapsed = time.perf_counter() - start
    if error is None and elapsed > budget:
        error = AssertionError(f"took {elapsed:.2f} s, budget {budget} s")
        detail = str(error)
    state = "PASS" if error is None else "FAIL"
    line = f"ACCEPTANCE {number} {state}  {title}  ({elapsed:.2f} s / {budget} s)"
    if detail:
        line += f"  {detail}"
    if capsys is None:
        print(line, flush=True)
    else:
        with capsys.disabled():
            print("\n" + line, flush=True)
    if error is not None:
        raise error


def nv_cell(prim, reps):
    cell = build_supercell(prim, reps)
    g = neighbor_graph(cell)
    cell = make_nv_defect(cell, 0, g.neighbors(0)[0], graph=g)
    return cell, neighbor_graph(cell)


def carve(cell, graph, rules):
    sel = select_cluster(cell, graph, nv_seed_sets(cell, graph), rules)
    cl, env = cap_selection(cell, graph, sel, (-1, 3))
    return cl, env, auxiliary_fragment(cl, env, graph)


def random_space(rng, n, n_el, core=0.0):
    h = rng.normal(size=(n, n))
    e = rng.normal(size=(n,) * 4)
    return ActiveSpace(n, n_el, h + h.T, sum(e.transpose(p) for p in PERMS) / 8, core)


def restricted_problem(seed, k):
    from embercap.meanfield import chain_model

    rng = np.random.default_rng(seed)
    m = chain_model(6, t=-(0.8 + 0.4 * rng.random(6)), onsite=0.3 * rng.normal(size=6),
                    smearing_width=0.0, valence=np.ones(6))
    prob = build_embedding_problem(m, [0, 1, 2])
    basis = rng.normal(size=(6, k))
    basis -= basis.mean(axis=0)
    return prob, np.linalg.qr(basis)[0]


def check_capping():
    cell, graph = nv_cell(diamond_conventional(), (2, 2, 2))
    cl, env, aux = carve(cell, graph, C15_RULES)
    caps = [c[0] for c in cl.cap_atoms]
    env_caps = [c[0] for c in env.cap_atoms]
    assert cell.formula == "C62N"
    assert (caps.count("F"), caps.count("O"), caps.count("B")) == (12, 12, 0), caps
    assert (env_caps.count("B"), len(env_caps)) == (12, 12), env_caps
    assert sorted(aux.component_formulas()) == ["F3O3B3"] * 4, aux.component_formulas()
    for atom, counts in zip(aux.atoms, component_bonding(aux, graph.cutoff, env.lattice)):
        if atom[0] == "B":
            assert counts == {"O": 2, "F": 1}, counts
    return f"{cl.formula} / {env.formula}, aux {'+'.join(aux.component_formulas())}"


def check_family():
    got = {}
    cell, graph = nv_cell(diamond_primitive(), (4, 4, 4))
    got["C21"] = carve(cell, graph, C21_RULES)[0].formula
    cell, graph = nv_cell(diamond_primitive(), (4, 4, 5))
    for key, rules in (("C24", C24_RULES), ("C30", C30_RULES), ("C36", C36_RULES)):
        got[key] = carve(cell, graph, rules)[0].formula
    want = {"C21": "C21NF18O9", "C24": "C24NF18O12", "C30": "C30NF24O9", "C36": "C36NF30O6"}
    assert got == want, got
    return ", ".join(got.values())


def check_symmetry():
    cell, graph = nv_cell(diamond_conventional(), (2, 2, 2))
    cl = carve(cell, graph, C15_RULES)[0]
    base = symmetry_measure(cl)
    assert base < 1e-3, base
    axis = symmetry_detail(cl.positions, cl.symbols).axis
    perp = np.cross(axis, [1.0, 0.0, 0.0])
    if np.linalg.norm(perp) < 0.1:
        perp = np.cross(axis, [0.0, 1.0, 0.0])
    perp /= np.linalg.norm(perp)
    worst = np.inf
    firsts = sorted({el: i for i, el in reversed(list(enumerate(cl.symbols)))}.values())
    for atom in firsts:
        pos = cl.positions.copy()
        pos[atom] += 0.3 * perp
        worst = min(worst, symmetry_measure(pos, species=cl.symbols))
    assert worst > base, (worst, base)
    return f"CSM {base:.2e}, smallest perturbed {worst:.2e} over {len(firsts)} species"


def check_oep():
    worst_fd, worst_iter, worst_res = 0.0, 0, 0.0
    n_problems = 20
    for seed in range(n_problems):
        prob, rng = random_embedding_problem(1000 + seed, max_sites=60,
                                             interacting=seed % 4 == 3)
        assert prob.full_model.n_sites <= 60
        v = rng.normal(0, 0.2, prob.size)
        _, g = wu_yang_value_and_gradient(prob, v)
        fd = central_difference(lambda x: wu_yang_value_and_gradient(prob, x)[0], v)
        rel = np.max(np.abs(fd - g)) / np.max(np.abs(g))
        assert rel <= 1e-6, (seed, rel)
        res = optimize_vemb(prob, tolerance=1e-6, max_iter=500)
        assert res.converged and res.trace[-1][1] < 1e-6, (seed, res.status)
        assert res.residual_max < 1e-6, (seed, res.residual_max)
        worst_fd = max(worst_fd, rel)
        worst_iter = max(worst_iter, res.iterations)
        worst_res = max(worst_res, res.residual_max)
    return (f"{n_problems} problems, FD rel {worst_fd:.1e}, <= {worst_iter} iterations, "
            f"residual {worst_res:.3e}")


def check_gauge():
    worst = 0.0
    for seed in range(10):
        prob, rng = random_embedding_problem(2000 + seed, max_sites=40)
        v = rng.normal(0, 0.3, prob.size)
        w0 = wu_yang_value_and_gradient(prob, v)[0]
        for c in (-10.0, -3.7, 0.5, 10.0):
            d = abs(wu_yang_value_and_gradient(prob, v + c)[0] - w0)
            assert d <= 1e-10, (seed, c, d)
            worst = max(worst, d)
    rng = np.random.default_rng(5)
    worst_de = 0.0
    for _ in range(5):
        sp = random_space(rng, 4, 4)
        a = excitation_energies(fci_solve(sp, 0, 8)).delta_e
        for c in (-10.0, 2.5, 10.0):
            b = excitation_energies(fci_solve(sp.shifted(c), 0, 8)).delta_e
            d = np.max(np.abs(np.subtract(a, b)))
            assert d <= 1e-10, (c, d)
            worst_de = max(worst_de, d)
    return f"max |dW| {worst:.1e}, max |d dE| {worst_de:.1e}"


def check_oracles():
    worst = 0.0
    for seed, k in ((0, 2), (1, 2), (2, 3)):
        prob, basis = restricted_problem(seed, k)
        kw = {} if k < 3 else {"half_width": 1.5,
                               "levels": ((0.1, None), (0.005, 0.2), (2.5e-4, 0.01))}
        w_grid, _ = grid_maximum(prob, basis, **kw)
        res = optimize_vemb(prob, tolerance=1e-9, basis=basis, gauge="none")
        d = abs(res.w_value - w_grid)
        assert d < 1e-5, (seed, k, d)
        worst = max(worst, d)
    rng = np.random.default_rng(11)
    worst_h = 0.0
    for n, n_el, sz in ((1, 1, 0.5), (2, 2, 0), (3, 4, 1), (3, 3, -0.5), (4, 4, 0),
                        (4, 5, 0.5), (4, 2, 1)):
        sp = random_space(rng, n, n_el, core=0.3)
        sec = make_sector(n, n_el, sz)
        dense = sector_block(fock_hamiltonian(sp.h, sp.eri, sp.core_energy), n, sec.alpha,
                             sec.beta)
        d = np.max(np.abs(sector_hamiltonian(sp, sec) - dense))
        assert d < 1e-12, (n, n_el, sz, d)
        worst_h = max(worst_h, d)
    return f"grid |dW*| {worst:.1e}, Hamiltonian max diff {worst_h:.1e}"


def check_nv():
    rep = classify_states(nv_spectrum(build_nv_active_space(reference_params())))
    labels = [s.label for s in rep.states]
    assert labels == ["3A2", "1E", "1E", "1A1", "3E", "3E"], labels

    def of(lab):
        return [s for s in rep.states if s.label == lab]

    (g,) = of("3A2")
    assert abs(g.s_squared - 2.0) < 1e-8
    ground = ci_report(g, 0.05)
    assert ground.rows[0][0] == "|211⟩" and ground.weight >= 0.9, ground.rows
    gap = max(abs(a.energy - b.energy) for a, b in (of("1E"), of("3E")))
    assert gap <= 1e-10, gap
    e = term_energies(rep)
    assert e["3A2"] < e["1E"] < e["1A1"] < e["3E"], e
    (a1,) = of("1A1")
    assert a1.coefficient("202") * a1.coefficient("220") > 0
    assert abs(a1.coefficient("022")) > 0
    for s in of("1E"):
        assert s.coefficient("202") * s.coefficient("220") < 0
    return "3A2 < 1E < 1A1 < 3E, " + ", ".join(f"{k} {v:.4f}" for k, v in e.items())


def check_size():
    def spectra(n_cells):
        model = ssh_defect_ring(n_cells)
        prob = build_embedding_problem(model, ring_window(model.n_sites, 1, 4))
        res = optimize_vemb(prob, tolerance=1e-8)
        assert res.converged, res.status
        emb = embedded_cluster_spectrum(prob, res, n_states=4).excitations
        bare = embedded_cluster_spectrum(prob, None, n_states=4).excitations
        return np.array(emb), np.array(bare), model.n_sites

    e1, b1, l1 = spectra(24)
    e2, b2, l2 = spectra(48)
    assert l2 == 2 * l1
    d_emb = np.max(np.abs(e1 - e2))
    d_bare = np.max(np.abs(b1 - e1))
    assert d_emb < 1e-3, d_emb
    assert d_bare > d_emb, (d_bare, d_emb)
    return f"L={l1}/{l2}: embedded diff {d_emb:.1e}, bare vs embedded {d_bare:.1e}"


GARBAGE = ["", "\n\n", "1\n", "abc def\n", "1.0 nan\n", "\x00\x01", "3\nx\nC 0 0\n",
           "&FCI NORB=-1\n&END\n", "electrons\n", "dims 2 2 2\nvalues 1\n"]


def check_parsers():
    rng = np.random.default_rng(3)
    lat = np.array([[3.1, 0.2, 0.0], [0.1, 4.2, 0.3], [0.0, -0.4, 5.0]])
    cell = CrystalCell(lat, ["C", "N", "B", "O"], rng.random((4, 3)))
    for fmt in ("vasp", "xyz"):
        back = parse_structure(emit_structure(cell, fmt))
        assert back.same_as(cell, tol=1e-8), fmt
    f = ScalarField((4, 3, 5), lat, rng.normal(size=60), "potential")
    text = write_density_file(f)
    assert np.array_equal(read_density_file(text).values, f.values)
    assert write_density_file(read_density_file(text)) == text
    sv = SiteVector(rng.normal(size=9), "ring")
    assert np.array_equal(read_density_file(write_density_file(sv)).values, sv.values)

    sp = parse_fcidump(" &FCI NORB=2,NELEC=2,MS2=0,\n &END\n 0.25 1 2 1 1\n")
    nz = {tuple(int(i) for i in ix) for ix in np.argwhere(sp.eri != 0)}
    assert nz == {tuple(np.array((0, 1, 0, 0))[list(p)]) for p in PERMS}, nz
    full = random_space(rng, 3, 4, core=0.7)
    back = parse_fcidump(write_fcidump(full))
    assert np.max(np.abs(back.eri - full.eri)) < 1e-12
    assert np.max(np.abs(back.h - full.h)) < 1e-12

    numbered = [
        (parse_structure, "2\nLattice=\"3 0 0 0 3 0 0 0 3\"\nC 0 0 0\nC 0 0 zz\n", 4),
        (parse_model, "electrons 2\nsite 0 0 0 0 0\nhop 0 1 -1\n", 3),
        (read_density_file, text.replace("dims 4 3 5", "dims 4 3"), None),
        (parse_fcidump, " &FCI NORB=1,NELEC=2,MS2=0,\n &END\n 0.5 1 1 1 3\n", 3),
        (parse_params, "eps_a1 x\n", 1),
    ]
    for parser, bad, line in numbered:
        with pytest.raises(ParseError) as info:
            parser(bad)
        assert info.value.lineno is not None, parser.__name__
        if line is not None:
            assert info.value.lineno == line, (parser.__name__, info.value.lineno)
    for parser in (parse_structure, parse_model, read_density_file, parse_fcidump,
                   parse_params):
        for bad in GARBAGE:
            try:
                parser(bad)
            except EmbercapError:
                pass
    return "structure, density, FCIDUMP and model round trips; errors line-numbered"


CRITERIA = [
    (1, "capping counts", check_capping, 1.0),
    (2, "cluster family", check_family, 5.0),
    (3, "C3v symmetry measure", check_symmetry, 10.0),
    (4, "OEP gradient and convergence", check_oep, 120.0),
    (5, "gauge and shift invariance", check_gauge, 30.0),
    (6, "brute-force oracles", check_oracles, 120.0),
    (7, "NV multiplet structure", check_nv, 10.0),
    (8, "size insensitivity", check_size, 60.0),
    (9, "parsers", check_parsers, 10.0),
]


@pytest.mark.parametrize("number, title, check, budget", CRITERIA,
                         ids=[f"criterion{n}" for n, *_ in CRITERIA])
def test_acceptance(number, title, check, budget, capsys):
    verdict(number, title, check, budget, capsys)


if __name__ == "__main__":
    failed = 0
    for args in CRITERIA:
        try:
            verdict(*args)
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
