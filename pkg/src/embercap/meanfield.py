"""Tight-binding mean-field solver standing in for the DFT engine.

The energy returned by :func:`solve` is the Fermi-Dirac free energy

    F = sum_sigma sum_k f_k eps_k - sum_i U_i n_i,up n_i,dn - T S

at fixed electron count, so dF/dv_i = n_i (Hellmann-Feynman) at any smearing
width T.  At T = 0 occupations follow the aufbau principle.

Model file layout (line oriented, ``#`` starts a comment)::

    name chain4
    spin restricted              # or unrestricted
    electrons 4                  # or "electrons 3 1" for (alpha, beta)
    smearing 0.01
    site 0 0.0  0.0 0.0 0.0  u=0.0 valence=1   # index onsite x y z [options]
    hop 0 1 -1.0                 # i j t, each bond once
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ParseError, ValidationError
from .field import SiteVector

DEFAULT_SMEARING = 0.01
SCF_MIXING = 0.3
SCF_MAX_ITER = 500
SCF_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TightBindingModel:
    onsite: np.ndarray
    hoppings: tuple  # (i, j, t) with i < j
    n_electrons: object  # int, or (n_alpha, n_beta)
    site_positions: np.ndarray | None = None
    interaction_u: np.ndarray | None = None
    spin_mode: str = "restricted"
    smearing_width: float = DEFAULT_SMEARING
    name: str = "model"
    valence: np.ndarray | None = None  # nominal electrons per site, used when partitioning
    anchors: np.ndarray | None = None  # parent-model site each site stands on
    cap_mask: np.ndarray | None = None

    def __post_init__(self):
        onsite = np.array(self.onsite, dtype=float).ravel()
        n = len(onsite)
        if n == 0:
            raise ValidationError("model has no sites")
        hops = {}
        for i, j, t in self.hoppings:
            i, j, t = int(i), int(j), float(t)
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValidationError(f"bad hopping ({i}, {j})")
            key = (min(i, j), max(i, j))
            if key in hops and abs(hops[key] - t) > 1e-12:
                raise ValidationError(f"hopping {key} given twice with different values")
            hops[key] = t
        pos = (np.zeros((n, 3)) if self.site_positions is None
               else np.array(self.site_positions, dtype=float).reshape(n, 3))
        u = None if self.interaction_u is None else np.array(self.interaction_u, dtype=float).ravel()
        if u is not None and len(u) != n:
            raise ValidationError("interaction_u length differs from site count")
        if u is not None and not np.any(u):
            u = None
        ne = self.n_electrons
        if isinstance(ne, (tuple, list, np.ndarray)):
            ne = (float(ne[0]), float(ne[1]))
            if any(x < 0 or x > n for x in ne):
                raise ValidationError(f"spin electron counts {ne} outside [0, {n}]")
        else:
            ne = float(ne)
            if not 0 <= ne <= 2 * n:
                raise ValidationError(f"electron count {ne} outside [0, {2 * n}]")
        if self.spin_mode not in ("restricted", "unrestricted"):
            raise ValidationError(f"spin_mode must be restricted or unrestricted, not {self.spin_mode!r}")
        if isinstance(ne, tuple) and self.spin_mode == "restricted" and ne[0] != ne[1]:
            raise ValidationError("restricted model needs equal alpha and beta counts")
        if self.smearing_width < 0:
            raise ValidationError("smearing width must be >= 0")
        object.__setattr__(self, "onsite", onsite)
        object.__setattr__(self, "hoppings", tuple((i, j, t) for (i, j), t in sorted(hops.items())))
        object.__setattr__(self, "site_positions", pos)
        object.__setattr__(self, "interaction_u", u)
        object.__setattr__(self, "n_electrons", ne)
        for name in ("valence", "anchors", "cap_mask"):
            val = getattr(self, name)
            if val is not None:
                val = np.array(val).ravel()
                if len(val) != n:
                    raise ValidationError(f"{name} length differs from site count")
                object.__setattr__(self, name, val)

    @property
    def n_sites(self):
        return len(self.onsite)

    @property
    def basis_tag(self):
        return self.name

    @property
    def spin_counts(self):
        ne = self.n_electrons
        if isinstance(ne, tuple):
            return ne
        if self.spin_mode == "restricted":
            return (ne / 2, ne / 2)
        nb = math.floor(ne / 2)
        return (ne - nb, nb)

    @property
    def total_electrons(self):
        return float(sum(self.spin_counts))

    def hopping_matrix(self):
        h = np.zeros((self.n_sites, self.n_sites))
        for i, j, t in self.hoppings:
            h[i, j] = h[j, i] = t
        return h

    def site_valence(self):
        if self.valence is not None:
            return np.asarray(self.valence, dtype=float)
        per = self.total_electrons / self.n_sites
        if abs(per - round(per)) > 1e-12:
            raise ValidationError(
                f"model {self.name!r} needs explicit per-site valence to be partitioned")
        return np.full(self.n_sites, float(round(per)))

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class MeanFieldResult:
    energy: float
    density: tuple  # SiteVector per spin channel (alpha, beta)
    orbital_energies: tuple
    orbital_coefficients: tuple
    occupations: tuple
    converged: bool
    scf_iterations: int
    entropy: float = 0.0

    @property
    def total_density(self):
        return self.density[0].values + self.density[1].values


# ---------------------------------------------------------------- occupations

def _fermi(eps, n, width, what="orbitals"):
    """Occupations in [0, 1] of one spin channel holding ``n`` electrons, and the entropy."""
    m = len(eps)
    if n <= 0:
        return np.zeros(m), 0.0
    if n >= m:
        return np.ones(m), 0.0
    if width == 0:
        f = np.zeros(m)
        full = int(math.floor(n + 1e-12))
        frac = n - full
        f[:full] = 1.0
        if frac > 1e-12:
            f[full] = frac
            top = full
            if (top > 0 and eps[top] - eps[top - 1] < 1e-10) or \
               (top + 1 < m and eps[top + 1] - eps[top] < 1e-10):
                raise ValidationError(
                    f"degenerate partially filled level in {what}; use nonzero smearing")
        elif full < m and full > 0 and eps[full] - eps[full - 1] < 1e-10:
            raise ValidationError(f"degenerate Fermi level in {what}; use nonzero smearing")
        return f, 0.0

    def excess(mu):
        return float(np.sum(expit((mu - eps) / width))) - n

    lo, hi = eps[0] - 40 * width - 1.0, eps[-1] + 40 * width + 1.0
    mu = brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    f = expit((mu - eps) / width)
    g = expit((eps - mu) / width)  # 1 - f without cancellation
    s = -float(np.sum(f * np.log(np.clip(f, 1e-300, 1.0)) + g * np.log(np.clip(g, 1e-300, 1.0))))
    return f, s


def _diag_channel(h, n, width, what):
    eps, c = np.linalg.eigh(h)
    f, s = _fermi(eps, n, width, what)
    dens = np.einsum("ik,k,ik->i", c, f, c)
    return eps, c, f, s, dens


def _potential_values(model, v_emb):
    if v_emb is None:
        return np.zeros(model.n_sites)
    if isinstance(v_emb, SiteVector):
        if v_emb.basis_tag != model.basis_tag:
            raise ValidationError(
                f"potential basis {v_emb.basis_tag!r} does not match model {model.basis_tag!r}")
        v = v_emb.values
    else:
        v = np.asarray(v_emb, dtype=float).ravel()
    if len(v) != model.n_sites:
        raise ValidationError(f"potential has {len(v)} entries for {model.n_sites} sites")
    return v


def solve(model, v_emb=None, *, max_iter=SCF_MAX_ITER, mixing=SCF_MIXING, tol=SCF_TOL,
          initial_density=None):
    """Ground state of ``model`` in the external site potential ``v_emb``."""
    v = _potential_values(model, v_emb)
    h0 = model.hopping_matrix() + np.diag(model.onsite + v)
    na, nb = model.spin_counts
    width = model.smearing_width
    u = model.interaction_u
    restricted = model.spin_mode == "restricted"
    tag = model.basis_tag

    if u is None:
        eps, c, f, s, dens = _diag_channel(h0, na, width, model.name)
        if restricted or na == nb:
            e = 2 * float(np.dot(f, eps)) - 2 * width * s
            chan = ((eps, c, f, dens),) * 2
            ent = 2 * s
        else:
            eps_b, c_b, f_b, s_b, dens_b = _diag_channel(h0, nb, width, model.name)
            e = float(np.dot(f, eps) + np.dot(f_b, eps_b)) - width * (s + s_b)
            chan = ((eps, c, f, dens), (eps_b, c_b, f_b, dens_b))
            ent = s + s_b
        return _result(e, chan, tag, True, 0, ent)

    if initial_density is not None:
        n_in = np.array(initial_density, dtype=float).reshape(2, -1)
    else:
        _, _, _, _, da = _diag_channel(h0, na, width, model.name)
        _, _, _, _, db = _diag_channel(h0, nb, width, model.name)
        n_in = np.array([da, db])
        if not restricted and na != nb:
            # break spin symmetry so an open-shell solution can develop
            n_in[0] = n_in[0] * 1.05
            n_in[0] *= na / max(n_in[0].sum(), 1e-300)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        chan, ent = [], 0.0
        if restricted:
            eps, c, f, s, d = _diag_channel(h0 + np.diag(u * n_in[1]), na, width, model.name)
            chan = [(eps, c, f, d), (eps, c, f, d)]
            ent = 2 * s
        else:
            for sigma, ns in ((0, na), (1, nb)):
                eps, c, f, s, d = _diag_channel(h0 + np.diag(u * n_in[1 - sigma]), ns, width,
                                                model.name)
                chan.append((eps, c, f, d))
                ent += s
        n_out = np.array([chan[0][3], chan[1][3]])
        change = float(np.max(np.abs(n_out - n_in)))
        if change < tol:
            converged = True
            n_in = n_out
            break
        n_in = (1 - mixing) * n_in + mixing * n_out
    # energy at the final density: band term from the last Hamiltonian, minus double counting
    band = sum(float(np.dot(ch[2], ch[0])) for ch in chan)
    e = band - float(np.sum(u * n_in[0] * n_in[1])) - width * ent
    return _result(e, tuple(chan), tag, converged, it, ent)


def _result(e, chan, tag, converged, iters, entropy):
    return MeanFieldResult(
        energy=float(e),
        density=tuple(SiteVector(ch[3], tag) for ch in chan),
        orbital_energies=tuple(ch[0] for ch in chan),
        orbital_coefficients=tuple(ch[1] for ch in chan),
        occupations=tuple(ch[2] for ch in chan),
        converged=converged,
        scf_iterations=iters,
        entropy=float(entropy),
    )


# ---------------------------------------------------------------- capping

@dataclass(frozen=True)
class SeveredBond:
    inside: int
    outside: int
    t: float


def severed_bonds(model, fragment_sites):
    frag = set(int(i) for i in fragment_sites)
    bad = [i for i in frag if not 0 <= i < model.n_sites]
    if bad:
        raise ValidationError(f"fragment sites {sorted(bad)} not in model")
    out = []
    for i, j, t in model.hoppings:
        if (i in frag) != (j in frag):
            inside, outside = (i, j) if i in frag else (j, i)
            out.append(SeveredBond(inside, outside, t))
    return sorted(out, key=lambda b: (b.inside, b.outside))


def capped_model(model, fragment_sites, cap_onsite=0.0, *, extra_electrons=0, spin_mode=None,
                 spin_counts=None, name=None, smearing_width=None, with_caps=True):
    """Fragment plus one cap site per severed bond.

    Each cap sits on the lost neighbor's position with that neighbor's onsite energy
    plus ``cap_onsite``, bonds to the inside atom with the severed hopping, and
    brings one electron.  ``anchors`` records the parent site each site stands on.
    With ``with_caps=False`` the bare fragment is returned (plain embedding).
    """
    frag = sorted(set(int(i) for i in fragment_sites))
    if not frag:
        raise ValidationError("empty fragment")
    cuts = severed_bonds(model, frag) if with_caps else []
    index = {s: k for k, s in enumerate(frag)}
    n_nat = len(frag)
    onsite = list(model.onsite[frag])
    pos = list(model.site_positions[frag])
    anchors = list(frag)
    hops = [(index[i], index[j], t) for i, j, t in model.hoppings if i in index and j in index]
    u = None if model.interaction_u is None else list(model.interaction_u[frag])
    val = model.site_valence()
    valence = list(val[frag])
    for k, b in enumerate(cuts):
        onsite.append(model.onsite[b.outside] + cap_onsite)
        pos.append(model.site_positions[b.outside])
        anchors.append(b.outside)
        hops.append((index[b.inside], n_nat + k, b.t))
        valence.append(1.0)
        if u is not None:
            u.append(0.0)
    n_el = float(sum(valence)) + extra_electrons
    if spin_counts is not None:
        if abs(sum(spin_counts) - n_el) > 1e-9:
            raise ValidationError(f"spin counts {spin_counts} do not add up to {n_el} electrons")
        n_el = tuple(spin_counts)
    return TightBindingModel(
        onsite=onsite, hoppings=hops, n_electrons=n_el, site_positions=pos, interaction_u=u,
        spin_mode=spin_mode or ("unrestricted" if spin_counts is not None else model.spin_mode),
        smearing_width=model.smearing_width if smearing_width is None else smearing_width,
        name=name or f"{model.name}[{len(frag)}+{len(cuts)}cap]",
        valence=valence, anchors=anchors, cap_mask=[False] * n_nat + [True] * len(cuts),
    )


def auxiliary_model(model, fragment_sites, cap_onsite=0.0, name=None, smearing_width=None):
    """All caps of both sides: one bonded pair per severed bond, two electrons each."""
    cuts = severed_bonds(model, fragment_sites)
    onsite, pos, anchors, hops = [], [], [], []
    for k, b in enumerate(cuts):
        # cap of the fragment sits on the outside site, cap of the complement on the inside site
        for site in (b.outside, b.inside):
            onsite.append(model.onsite[site] + cap_onsite)
            pos.append(model.site_positions[site])
            anchors.append(site)
        hops.append((2 * k, 2 * k + 1, b.t))
    if not cuts:
        return None
    return TightBindingModel(
        onsite=onsite, hoppings=hops, n_electrons=2.0 * len(cuts), site_positions=pos,
        spin_mode="restricted",
        smearing_width=model.smearing_width if smearing_width is None else smearing_width,
        name=name or f"{model.name}[aux{len(cuts)}]",
        valence=[1.0] * len(onsite), anchors=anchors, cap_mask=[True] * len(onsite),
    )


# ---------------------------------------------------------------- builders

def chain_model(n, t=-1.0, onsite=0.0, n_electrons=None, spacing=1.5, periodic=False, **kw):
    onsite = np.broadcast_to(np.asarray(onsite, dtype=float), (n,)).copy()
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,)).copy()
    hops = [(i, i + 1, t[i]) for i in range(n - 1)]
    if periodic and n > 2:
        hops.append((0, n - 1, t[n - 1]))
    pos = np.zeros((n, 3))
    pos[:, 0] = spacing * np.arange(n)
    return TightBindingModel(onsite, hops, n if n_electrons is None else n_electrons,
                             site_positions=pos, **kw)


def ring_model(n, t=-1.0, **kw):
    m = chain_model(n, t, periodic=True, **kw)
    ang = 2 * np.pi * np.arange(n) / n
    r = 1.5 * n / (2 * np.pi)
    pos = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(n)], axis=1)
    return m.with_(site_positions=pos)


# ---------------------------------------------------------------- file format

def parse_model(text, source=None):
    opts = {"name": "model", "spin_mode": "restricted", "smearing_width": DEFAULT_SMEARING}
    sites, hops, nel = {}, [], None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *toks = line.split()
        try:
            if key == "name":
                opts["name"] = toks[0]
            elif key == "spin":
                if toks[0] not in ("restricted", "unrestricted"):
                    raise ParseError(f"unknown spin mode {toks[0]!r}", lineno, source)
                opts["spin_mode"] = toks[0]
            elif key == "electrons":
                vals = [float(x) for x in toks]
                if len(vals) not in (1, 2):
                    raise ParseError("electrons takes one or two numbers", lineno, source)
                nel = vals[0] if len(vals) == 1 else (vals[0], vals[1])
            elif key == "smearing":
                opts["smearing_width"] = float(toks[0])
            elif key == "site":
                idx = int(toks[0])
                nums = [float(x) for x in toks[1:5]]
                if len(nums) != 4:
                    raise ParseError("site needs: index onsite x y z", lineno, source)
                extra = {}
                for kv in toks[5:]:
                    k, _, v = kv.partition("=")
                    if k not in ("u", "valence"):
                        raise ParseError(f"unknown site option {k!r}", lineno, source)
                    extra[k] = float(v)
                if idx in sites:
                    raise ParseError(f"site {idx} defined twice", lineno, source)
                sites[idx] = (nums, extra, lineno)
            elif key == "hop":
                if len(toks) != 3:
                    raise ParseError("hop needs: i j t", lineno, source)
                hops.append((int(toks[0]), int(toks[1]), float(toks[2]), lineno))
            else:
                raise ParseError(f"unknown keyword {key!r}", lineno, source)
        except (ValueError, IndexError):
            raise ParseError(f"malformed {key!r} line: {raw.strip()!r}", lineno, source) from None
        if any(not math.isfinite(x) for x in _numbers(toks)):
            raise ParseError("non-finite number", lineno, source)
    n = len(sites)
    if n == 0:
        raise ParseError("no sites defined", None, source)
    if sorted(sites) != list(range(n)):
        raise ParseError("site indices must be 0..n-1 without gaps", None, source)
    for i, j, _, ln in hops:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ParseError(f"hop ({i}, {j}) references missing site", ln, source)
    if nel is None:
        raise ParseError("missing 'electrons' line", None, source)
    onsite = [sites[i][0][0] for i in range(n)]
    pos = [sites[i][0][1:] for i in range(n)]
    u = [sites[i][1].get("u", 0.0) for i in range(n)]
    has_val = any("valence" in sites[i][1] for i in range(n))
    val = [sites[i][1].get("valence", 1.0) for i in range(n)] if has_val else None
    try:
        return TightBindingModel(onsite, [(i, j, t) for i, j, t, _ in hops], nel, pos,
                                 u if any(u) else None, valence=val, **opts)
    except ValidationError as exc:
        raise ParseError(str(exc), None, source) from None


def _numbers(toks):
    for t in toks:
        t = t.partition("=")[2] or t
        try:
            yield float(t)
        except ValueError:
            continue


def write_model(model):
    out = [f"name {model.name}", f"spin {model.spin_mode}"]
    ne = model.n_electrons
    out.append("electrons " + (" ".join(f"{x:.17g}" for x in ne) if isinstance(ne, tuple)
                               else f"{ne:.17g}"))
    out.append(f"smearing {model.smearing_width:.17g}")
    for i in range(model.n_sites):
        x, y, z = model.site_positions[i]
        row = f"site {i} {model.onsite[i]:.17g} {x:.17g} {y:.17g} {z:.17g}"
        if model.interaction_u is not None:
            row += f" u={model.interaction_u[i]:.17g}"
        if model.valence is not None:
            row += f" valence={model.valence[i]:.17g}"
        out.append(row)
    for i, j, t in model.hoppings:
        out.append(f"hop {i} {j} {t:.17g}")
    return "\n".join(out) + "\n"
