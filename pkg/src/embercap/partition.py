"""Cluster/environment carving and valence-complementary capping.

Every severed bond is healed on both sides.  On the cluster side a missing
site is replaced by F, O or B when one, two or three cluster atoms bond to it;
on the environment side the removed cluster atoms are replaced the same way.
The union of both cap sets forms the auxiliary fragment.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .elements import CAP_BY_SHARING, CAP_VALENCE, fragment_formula
from .errors import ValidationError
from .lattice import emit_xyz

PARTITION_SCHEMA = "embercap.partition.v1"


@dataclass(frozen=True)
class GrowthRule:
    """Add the neighbors of a named set to the cluster.

    ``neighbors_of`` names a seed set, an earlier rule, or "cluster".  Candidates
    must not already be in the cluster, must match ``element`` when given, and must
    bond to at least ``min_shared`` atoms of the current cluster.  The added atoms
    become a new named set ``name``.
    """

    name: str
    neighbors_of: str
    element: str | None = None
    min_shared: int = 1


@dataclass(frozen=True)
class FragmentSelection:
    cluster_atoms: frozenset
    environment_atoms: frozenset
    named_sets: dict = field(default_factory=dict, compare=False)
    seed_atoms: frozenset = field(default=frozenset(), compare=False)

    def __post_init__(self):
        if self.cluster_atoms & self.environment_atoms:
            raise ValidationError("cluster and environment overlap")


@dataclass(frozen=True, eq=False)
class CappedFragment:
    native_atoms: tuple  # (element, xyz)
    native_sites: tuple  # source-cell index per native atom
    cap_atoms: tuple  # (element, xyz, provenance site index)
    total_charge: int = 0
    spin_multiplicity: int = 1
    severed_bonds: tuple = ()  # (inside site, outside site, image offset)
    lattice: np.ndarray | None = None  # set for periodic fragments

    @property
    def formula(self):
        return fragment_formula([a[0] for a in self.native_atoms], [c[0] for c in self.cap_atoms])

    @property
    def symbols(self):
        return [a[0] for a in self.native_atoms] + [c[0] for c in self.cap_atoms]

    @property
    def positions(self):
        pos = [a[1] for a in self.native_atoms] + [c[1] for c in self.cap_atoms]
        return np.array(pos, dtype=float).reshape(-1, 3)

    def cap_counts(self):
        out = {"F": 0, "O": 0, "B": 0}
        for c in self.cap_atoms:
            out[c[0]] += 1
        return out

    def cap_valence(self):
        return sum(CAP_VALENCE[c[0]] for c in self.cap_atoms)

    def to_xyz(self, comment=None):
        prov = ["native"] * len(self.native_atoms)
        prov += [f"cap:{el}<-site{p}" for el, _, p in self.cap_atoms]
        comment = comment or f"{self.formula} charge={self.total_charge} mult={self.spin_multiplicity}"
        return emit_xyz(self.symbols, self.positions, lattice=self.lattice, comment=comment,
                        extra_columns={"provenance": prov})


@dataclass(frozen=True, eq=False)
class AuxiliaryFragment:
    atoms: tuple  # (element, xyz, provenance, origin) with origin "cluster" or "environment"
    connected_components: tuple  # tuple of frozensets of atom indices
    closed_shell: tuple  # per component

    @property
    def formula(self):
        return fragment_formula([], [a[0] for a in self.atoms])

    def component_formulas(self):
        return [fragment_formula([], [self.atoms[i][0] for i in sorted(c)])
                for c in self.connected_components]


# ---------------------------------------------------------------- selection

def resolve_seeds(cell, graph, spec):
    """Turn a seed description into named index sets.

    ``spec`` maps set names to either an index list or a selector dict with
    optional ``element`` and ``degree`` keys (e.g. the three-fold C of a vacancy).
    A bare list is returned as the set "seeds".
    """
    if isinstance(spec, (list, tuple, set, frozenset)):
        spec = {"seeds": list(spec)}
    out = {}
    for name, sel in spec.items():
        if isinstance(sel, dict):
            unknown = set(sel) - {"element", "degree"}
            if unknown:
                raise ValidationError(f"unknown seed selector keys {sorted(unknown)}")
            idx = [i for i in range(len(cell))
                   if ("element" not in sel or cell.symbols[i] == sel["element"])
                   and ("degree" not in sel or graph.degree(i) == sel["degree"])]
        else:
            idx = [int(i) for i in sel]
        out[name] = idx
    return out


def nv_seed_sets(cell, graph):
    """The N dopant and the three-fold coordinated carbons next to the vacancy."""
    return resolve_seeds(cell, graph, {"n": {"element": "N"}, "c3c": {"element": "C", "degree": 3}})


def select_cluster(cell, graph, seeds, growth_rules=()):
    seeds = seeds if isinstance(seeds, dict) else {"seeds": list(seeds)}
    n = len(cell)
    named = {}
    cluster = set()
    for name, idx in seeds.items():
        for i in idx:
            if not 0 <= i < n:
                raise ValidationError(f"seed index {i} out of range for {n} sites")
        named[name] = sorted(set(idx))
        cluster |= set(idx)
    if not cluster:
        raise ValidationError("seed set is empty")
    for rule in growth_rules:
        if isinstance(rule, dict):
            rule = GrowthRule(**rule)
        if rule.neighbors_of == "cluster":
            base = sorted(cluster)
        elif rule.neighbors_of in named:
            base = named[rule.neighbors_of]
        else:
            raise ValidationError(f"growth rule {rule.name!r} references unknown set "
                                  f"{rule.neighbors_of!r}")
        cand = sorted({j for i in base for j in graph.neighbors(i)} - cluster)
        added = []
        for j in cand:
            if rule.element is not None and cell.symbols[j] != rule.element:
                continue
            shared = sum(1 for k, _, _ in graph.adjacency[j] if k in cluster)
            if shared >= rule.min_shared:
                added.append(j)
        named[rule.name] = added
        cluster |= set(added)
    seed_atoms = frozenset(i for idx in seeds.values() for i in idx)
    return FragmentSelection(frozenset(cluster), frozenset(range(n)) - frozenset(cluster), named,
                             seed_atoms)


# ---------------------------------------------------------------- capping

def _min_image(cell, frac, ref):
    d = frac - ref
    d -= np.round(d) * np.array(cell.pbc)
    return np.round(ref + d - frac).astype(int)


def _unwrap(cell, graph, atoms, anchors=None):
    """Assign each fragment atom one periodic image.

    Bonded pieces are walked breadth-first; each piece's root goes to the image
    nearest the centroid of ``anchors`` (default: the lowest index).  Pieces that
    only meet through missing sites, like the stars around a vacancy, thereby
    end up in one frame.
    """
    atoms = set(atoms)
    anchors = sorted(anchors) if anchors else [min(atoms)]
    f0 = cell.frac[anchors[0]]
    ref = np.mean([cell.frac[a] + _min_image(cell, cell.frac[a], f0) for a in anchors], axis=0)
    image = {}
    for start in sorted(atoms):
        if start in image:
            continue
        image[start] = _min_image(cell, cell.frac[start], ref)
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j, off, _ in graph.adjacency[i]:
                if j in atoms and j not in image:
                    image[j] = image[i] + np.array(off)
                    queue.append(j)
    for i in atoms:
        for j, off, _ in graph.adjacency[i]:
            if j in atoms and not np.array_equal(image[j], image[i] + np.array(off)):
                raise ValidationError(
                    f"fragment wraps onto its own periodic image at sites {i}-{j}; "
                    "use a larger supercell")
    return image


def _cap_position(anchors, target, element, bond_scale):
    s = bond_scale.get(element, 1.0) if bond_scale else 1.0
    if s == 1.0:
        return target
    return np.mean([a + s * (target - a) for a in anchors], axis=0)


def cap_selection(cell, graph, sel, charge_assignment=(0, 1), bond_scale=None):
    """Cap both sides of a selection.  Returns (cluster, environment) CappedFragments.

    ``charge_assignment`` is (charge, multiplicity) for the cluster; the environment
    is neutral and closed-shell.  ``bond_scale`` optionally maps a cap element to a
    factor applied along its severed bond(s); caps sit on the ideal missing site by
    default.
    """
    cl, env = sel.cluster_atoms, sel.environment_atoms
    lat = cell.lattice
    cart = cell.cart
    image = _unwrap(cell, graph, cl, sel.seed_atoms or None)
    pos = {i: cart[i] + image[i] @ lat for i in cl}

    severed = []
    missing = {}  # (site, image) -> list of inside atoms
    for i in sorted(cl):
        for j, off, _ in graph.adjacency[i]:
            if j in cl:
                continue
            severed.append((i, j, off))
            key = (j, tuple(int(x) for x in image[i] + np.array(off)))
            missing.setdefault(key, []).append(i)

    caps = []
    for (j, img), inside in sorted(missing.items()):
        count = len(inside)
        if count not in CAP_BY_SHARING:
            raise ValidationError(
                f"missing site {j} is shared by {count} cluster atoms; no cap exists for "
                f"sharing count {count}, include site {j} in the cluster")
        el = CAP_BY_SHARING[count]
        target = cart[j] + np.array(img) @ lat
        caps.append((el, _cap_position([pos[i] for i in inside], target, el, bond_scale), j))

    env_shared = {}
    for j in sorted(env):
        for i, off, _ in graph.adjacency[j]:
            if i in cl:
                env_shared.setdefault(i, []).append(j)
    env_caps = []
    for i, outside in sorted(env_shared.items()):
        count = len(outside)
        if count not in CAP_BY_SHARING:
            raise ValidationError(
                f"cluster site {i} is shared by {count} environment atoms; no cap exists for "
                f"sharing count {count}, move site {i} to the environment")
        el = CAP_BY_SHARING[count]
        anchors = []
        for j in outside:
            for k, off, _ in graph.adjacency[j]:
                if k == i:
                    anchors.append(pos[i] - (cart[i] + np.array(off) @ lat - cart[j]))
        env_caps.append((el, _cap_position(anchors, pos[i], el, bond_scale), i))

    charge, mult = charge_assignment
    cluster = CappedFragment(
        native_atoms=tuple((cell.symbols[i], pos[i]) for i in sorted(cl)),
        native_sites=tuple(sorted(cl)),
        cap_atoms=tuple(caps),
        total_charge=int(charge),
        spin_multiplicity=int(mult),
        severed_bonds=tuple(severed),
    )
    environment = CappedFragment(
        native_atoms=tuple((cell.symbols[j], cart[j]) for j in sorted(env)),
        native_sites=tuple(sorted(env)),
        cap_atoms=tuple(env_caps),
        total_charge=0,
        spin_multiplicity=1,
        severed_bonds=tuple((i, j, tuple(-o for o in off)) for i, j, off in severed),
        lattice=np.array(lat) if any(cell.pbc) else None,
    )
    return cluster, environment


# ---------------------------------------------------------------- auxiliary fragment

def _pair_distances(pos, lattice, cutoff):
    diff = pos[None, :, :] - pos[:, None, :]
    if lattice is None:
        return np.linalg.norm(diff, axis=-1)
    frac = diff @ np.linalg.inv(lattice)
    best = np.full(diff.shape[:2], np.inf)
    # minimum image; caps of one fragment never span more than one neighboring image
    for off in np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1])).T.reshape(-1, 3):
        d = np.linalg.norm((frac - np.round(frac) + off) @ lattice, axis=-1)
        best = np.minimum(best, d)
    return best


def auxiliary_fragment(cluster, environment, graph):
    atoms = tuple((*c, "cluster") for c in cluster.cap_atoms)
    atoms += tuple((*c, "environment") for c in environment.cap_atoms)
    if not atoms:
        return AuxiliaryFragment((), (), ())
    pos = np.array([a[1] for a in atoms], dtype=float)
    lattice = environment.lattice if environment.lattice is not None else cluster.lattice
    d = _pair_distances(pos, lattice, graph.cutoff)
    bonded = (d <= graph.cutoff) & ~np.eye(len(atoms), dtype=bool)
    seen = np.zeros(len(atoms), dtype=bool)
    comps, closed = [], []
    for start in range(len(atoms)):
        if seen[start]:
            continue
        comp, queue = [], [start]
        seen[start] = True
        while queue:
            i = queue.pop()
            comp.append(i)
            for j in np.nonzero(bonded[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    queue.append(int(j))
        comp = frozenset(comp)
        # closed shell: every cap valence is paired by a cap of the other fragment
        valence = sum(CAP_VALENCE[atoms[i][0]] for i in comp)
        n_cross = sum(int(bonded[i, j]) for i in comp for j in comp
                      if i < j and atoms[i][3] != atoms[j][3])
        comps.append(comp)
        closed.append(valence % 2 == 0 and valence == 2 * n_cross)
    return AuxiliaryFragment(atoms, tuple(comps), tuple(closed))


def component_bonding(aux, cutoff, lattice=None):
    """Neighbor element counts per atom, e.g. {"O": 2, "F": 1} for each B of an F3O3B3 unit."""
    pos = np.array([a[1] for a in aux.atoms], dtype=float)
    d = _pair_distances(pos, lattice, cutoff)
    out = []
    for i in range(len(aux.atoms)):
        nb = {}
        for j in np.nonzero((d[i] <= cutoff) & (np.arange(len(pos)) != i))[0]:
            el = aux.atoms[j][0]
            nb[el] = nb.get(el, 0) + 1
        out.append(nb)
    return out


# ---------------------------------------------------------------- report

def partition_report(cluster, environment, aux, csm=None, csm_threshold=1e-3, label=None):
    report = {
        "schema": PARTITION_SCHEMA,
        "cluster": {
            "formula": cluster.formula,
            "charge": cluster.total_charge,
            "multiplicity": cluster.spin_multiplicity,
            "n_native": len(cluster.native_atoms),
            "caps": cluster.cap_counts(),
        },
        "environment": {
            "formula": environment.formula,
            "charge": environment.total_charge,
            "multiplicity": environment.spin_multiplicity,
            "n_native": len(environment.native_atoms),
            "caps": environment.cap_counts(),
        },
        "auxiliary": {
            "formula": aux.formula,
            "n_components": len(aux.connected_components),
            "components": aux.component_formulas(),
            "closed_shell": list(aux.closed_shell),
        },
        "severed_bonds": len(cluster.severed_bonds),
    }
    if label is not None:
        report["label"] = label
    if csm is not None:
        report["symmetry"] = {"group": "C3v", "csm": csm, "threshold": csm_threshold,
                              "symmetric": bool(csm < csm_threshold)}
    return report


def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
