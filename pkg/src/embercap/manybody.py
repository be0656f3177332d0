"""Full configuration interaction in a small active space.

Determinants are pairs of alpha/beta occupation bit strings.  The sign
convention is that of the ordered product of creation operators, alpha
spin orbitals (0..n-1) before beta spin orbitals (n..2n-1), each block in
ascending order, acting on the vacuum.  Two-electron integrals are in
chemists' notation (pq|rs).

FCIDUMP layout (the common Knowles-Handy interchange format)::

     &FCI NORB=3,NELEC=4,MS2=0,
      ORBSYM=1,1,1,
      ISYM=1,
     &END
      value  p  q  r  s      # (pq|rs), 1-based
      value  p  q  0  0      # h_pq
      value  0  0  0  0      # core energy
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .field import SiteVector

SPECTRUM_SCHEMA = "embercap.spectrum.v1"
DEGENERACY_TOL = 1e-9
BAR = "̄"  # combining overline: "1̄" marks a beta electron


@dataclass(frozen=True, eq=False)
class ActiveSpace:
    n_orbitals: int
    n_electrons: int
    h: np.ndarray
    eri: np.ndarray
    core_energy: float = 0.0

    def __post_init__(self):
        n = int(self.n_orbitals)
        h = np.array(self.h, dtype=float).reshape(n, n)
        eri = np.array(self.eri, dtype=float).reshape(n, n, n, n)
        if not np.allclose(h, h.T, atol=1e-12, rtol=0):
            raise ValidationError("one-electron integrals are not symmetric")
        for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
            if not np.allclose(eri, eri.transpose(perm), atol=1e-12, rtol=0):
                raise ValidationError(f"two-electron integrals lack symmetry {perm}")
        if not 0 <= self.n_electrons <= 2 * n:
            raise ValidationError(f"{self.n_electrons} electrons do not fit in {n} orbitals")
        object.__setattr__(self, "n_orbitals", n)
        object.__setattr__(self, "n_electrons", int(self.n_electrons))
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "eri", eri)
        object.__setattr__(self, "core_energy", float(self.core_energy))

    def rotated(self, u):
        """Integrals in the orbital basis phi'_q = sum_p phi_p u_pq."""
        u = np.asarray(u, dtype=float)
        h = u.T @ self.h @ u
        eri = np.einsum("pqrs,pa,qb,rc,sd->abcd", self.eri, u, u, u, u, optimize=True)
        return ActiveSpace(self.n_orbitals, self.n_electrons, h, eri, self.core_energy)

    def shifted(self, c):
        """Uniform one-body shift h -> h + c*1."""
        return ActiveSpace(self.n_orbitals, self.n_electrons, self.h + c * np.eye(self.n_orbitals),
                           self.eri, self.core_energy)


def symmetrize_eri(eri):
    """Fill all eight permutational images from whatever entries are nonzero."""
    out = np.array(eri, dtype=float)
    for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (1, 0, 3, 2),
                 (2, 3, 0, 1), (3, 2, 0, 1), (2, 3, 1, 0), (3, 2, 1, 0)):
        t = eri.transpose(perm)
        out = np.where(out == 0, t, out)
    return out


# ---------------------------------------------------------------- FCIDUMP

def _images(p, q, r, s):
    return {(p, q, r, s), (q, p, r, s), (p, q, s, r), (q, p, s, r),
            (r, s, p, q), (s, r, p, q), (r, s, q, p), (s, r, q, p)}


def parse_fcidump(text, source=None):
    lines = text.splitlines()
    header, body_start = [], None
    for k, ln in enumerate(lines):
        header.append(ln)
        if re.search(r"&END|^\s*/\s*$", ln, re.IGNORECASE):
            body_start = k + 1
            break
    if body_start is None:
        raise ParseError("missing &END terminating the namelist header", len(lines), source)
    head = " ".join(header)
    vals = {}
    for key in ("NORB", "NELEC", "MS2"):
        m = re.search(rf"\b{key}\s*=\s*(-?\d+)", head, re.IGNORECASE)
        if m:
            vals[key] = int(m.group(1))
    if "NORB" not in vals or "NELEC" not in vals:
        raise ParseError("header must declare NORB and NELEC", 1, source)
    n = vals["NORB"]
    if n < 1:
        raise ParseError("NORB must be positive", 1, source)
    h = np.zeros((n, n))
    eri = np.zeros((n, n, n, n))
    core = 0.0
    seen = {}  # canonical key -> (value, line)
    for k in range(body_start, len(lines)):
        toks = lines[k].split()
        if not toks:
            continue
        lineno = k + 1
        if len(toks) != 5:
            raise ParseError(f"expected 'value p q r s', got {lines[k].strip()!r}", lineno, source)
        try:
            val = float(toks[0].replace("D", "E").replace("d", "e"))
            p, q, r, s = (int(t) for t in toks[1:])
        except ValueError:
            raise ParseError(f"malformed integral line {lines[k].strip()!r}", lineno, source) from None
        if not math.isfinite(val):
            raise ParseError("non-finite integral", lineno, source)
        if any(i < 0 or i > n for i in (p, q, r, s)):
            raise ParseError(f"index out of range 0..{n} in {lines[k].strip()!r}", lineno, source)
        if p and q and r and s:
            key = min(_images(p, q, r, s))
            kind = "eri"
        elif p and q and not r and not s:
            key = ("h", min(p, q), max(p, q))
            kind = "h"
        elif not p and not q and not r and not s:
            key = ("core",)
            kind = "core"
        elif p and not q and not r and not s:
            continue  # orbital energy, not needed
        else:
            raise ParseError(f"unsupported index pattern {(p, q, r, s)}", lineno, source)
        if key in seen and abs(seen[key][0] - val) > 1e-10:
            raise ParseError(
                f"conflicting duplicate of integral {(p, q, r, s)} (first on line {seen[key][1]})",
                lineno, source)
        seen[key] = (val, lineno)
        if kind == "eri":
            for a, b, c, d in _images(p - 1, q - 1, r - 1, s - 1):
                eri[a, b, c, d] = val
        elif kind == "h":
            h[p - 1, q - 1] = h[q - 1, p - 1] = val
        else:
            core = val
    try:
        return ActiveSpace(n, vals["NELEC"], h, eri, core)
    except ValidationError as exc:
        raise ParseError(str(exc), None, source) from None


def write_fcidump(space, ms2=0, tol=0.0):
    n = space.n_orbitals
    out = [f" &FCI NORB={n},NELEC={space.n_electrons},MS2={ms2},",
           "  ORBSYM=" + ",".join("1" * n) + ",", "  ISYM=1,", " &END"]
    for p in range(n):
        for q in range(p + 1):
            for r in range(n):
                for s in range(r + 1):
                    if p * (p + 1) // 2 + q < r * (r + 1) // 2 + s:
                        continue
                    v = space.eri[p, q, r, s]
                    if abs(v) > tol and v != 0.0:
                        out.append(f" {v:.17e} {p + 1:3d} {q + 1:3d} {r + 1:3d} {s + 1:3d}")
    for p in range(n):
        for q in range(p + 1):
            v = space.h[p, q]
            if abs(v) > tol and v != 0.0:
                out.append(f" {v:.17e} {p + 1:3d} {q + 1:3d}   0   0")
    out.append(f" {space.core_energy:.17e}   0   0   0   0")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- one-body embedding

def embed_one_body(space, v, orbitals):
    """h' = h + C^T diag(v) C for a site potential v and site->orbital coefficients C."""
    vals = v.values if isinstance(v, SiteVector) else np.asarray(v, dtype=float).ravel()
    c = np.asarray(orbitals, dtype=float)
    if c.ndim != 2 or c.shape != (len(vals), space.n_orbitals):
        raise ValidationError(
            f"orbital map shape {c.shape} incompatible with {len(vals)} sites and "
            f"{space.n_orbitals} orbitals")
    return ActiveSpace(space.n_orbitals, space.n_electrons, space.h + c.T @ (vals[:, None] * c),
                       space.eri, space.core_energy)


def active_space_from_sites(h_site, u_site, orbitals, active, n_active_electrons, core=()):
    """Project a site Hamiltonian with on-site repulsion onto chosen orbitals.

    ``orbitals`` holds orbital coefficients as columns; doubly occupied ``core``
    orbitals are folded into the core energy and an effective one-body term.
    """
    c = np.asarray(orbitals, dtype=float)
    u = np.asarray(u_site, dtype=float).ravel()
    h_site = np.asarray(h_site, dtype=float)
    cc = c[:, list(core)]
    ca = c[:, list(active)]

    def eri(x, y, z, w):
        return np.einsum("i,ip,iq,ir,is->pqrs", u, x, y, z, w, optimize=True)

    h_act = ca.T @ h_site @ ca
    e_core = 0.0
    if cc.shape[1]:
        dcore = cc @ cc.T  # one spin's density matrix of the core
        jk = u * np.diag(dcore)  # on-site: J - K/2 per spin folded below
        e_core = 2 * float(np.trace(cc.T @ h_site @ cc)) + float(np.sum(u * np.diag(dcore) ** 2))
        # Hubbard mean field of a closed-shell core on the active space: sum_c 2(pq|cc) - (pc|cq)
        h_act = h_act + ca.T @ (jk[:, None] * ca)
    return ActiveSpace(ca.shape[1], n_active_electrons, h_act, eri(ca, ca, ca, ca), e_core)


# ---------------------------------------------------------------- determinants

def _strings(n, k):
    return [sum(1 << i for i in occ) for occ in itertools.combinations(range(n), k)]


def _bits(x):
    out, i = [], 0
    while x:
        if x & 1:
            out.append(i)
        x >>= 1
        i += 1
    return out


def _popcount_below(x, p):
    return bin(x & ((1 << p) - 1)).count("1")


def sector_counts(n_electrons, sz):
    na2 = n_electrons + 2 * sz
    if abs(na2 - round(na2)) > 1e-9 or round(na2) % 2:
        raise ValidationError(f"sz={sz} incompatible with {n_electrons} electrons")
    na = int(round(na2)) // 2
    return na, n_electrons - na


@dataclass(frozen=True, eq=False)
class Sector:
    n_orbitals: int
    n_alpha: int
    n_beta: int
    alpha: tuple
    beta: tuple

    @property
    def dim(self):
        return len(self.alpha) * len(self.beta)

    @property
    def sz(self):
        return (self.n_alpha - self.n_beta) / 2

    def determinants(self):
        return [(a, b) for a in self.alpha for b in self.beta]

    def spin_orbital_bits(self, det):
        a, b = det
        return a | (b << self.n_orbitals)


def make_sector(n_orbitals, n_electrons, sz):
    na, nb = sector_counts(n_electrons, sz)
    if not (0 <= na <= n_orbitals and 0 <= nb <= n_orbitals):
        raise ValidationError(f"empty sector: {n_electrons} electrons with sz={sz} in "
                              f"{n_orbitals} orbitals")
    return Sector(n_orbitals, na, nb, tuple(_strings(n_orbitals, na)), tuple(_strings(n_orbitals, nb)))


def _spin_orbital_integrals(space):
    n = space.n_orbitals
    h = np.zeros((2 * n, 2 * n))
    h[:n, :n] = h[n:, n:] = space.h
    # <pq|rs> = (pr|qs) when spins of p,r and of q,s agree
    spat = space.eri.transpose(0, 2, 1, 3)
    g = np.zeros((2 * n,) * 4)
    for sp, sq in itertools.product((0, 1), repeat=2):
        g[sp * n:(sp + 1) * n, sq * n:(sq + 1) * n, sp * n:(sp + 1) * n, sq * n:(sq + 1) * n] = spat
    return h, g - g.transpose(0, 1, 3, 2)


def _annihilate(bits, p):
    return (-1) ** _popcount_below(bits, p), bits & ~(1 << p)


def _create(bits, p):
    return (-1) ** _popcount_below(bits, p), bits | (1 << p)


def sector_hamiltonian(space, sector):
    """Dense sector Hamiltonian from the Slater-Condon rules (core energy included)."""
    n = space.n_orbitals
    h, g = _spin_orbital_integrals(space)
    dets = [sector.spin_orbital_bits(d) for d in sector.determinants()]
    index = {d: k for k, d in enumerate(dets)}
    dim = len(dets)
    ham = np.zeros((dim, dim))
    m2 = 2 * n
    for k, d in enumerate(dets):
        occ = _bits(d)
        vir = [p for p in range(m2) if not d >> p & 1]
        ham[k, k] = (sum(h[i, i] for i in occ)
                     + 0.5 * sum(g[i, j, i, j] for i in occ for j in occ) + space.core_energy)
        for m in occ:
            s1, d1 = _annihilate(d, m)
            for p in vir:
                if (p >= n) != (m >= n):
                    continue
                s2, d2 = _create(d1, p)
                kk = index.get(d2)
                if kk is None or kk <= k:
                    continue
                val = h[p, m] + sum(g[p, j, m, j] for j in occ)
                ham[kk, k] = ham[k, kk] = s1 * s2 * val
        for m, nn in itertools.combinations(occ, 2):
            s1, d1 = _annihilate(d, m)
            s2, d2 = _annihilate(d1, nn)
            for p, q in itertools.combinations(vir, 2):
                val = g[p, q, m, nn]
                if val == 0.0:
                    continue
                s3, d3 = _create(d2, q)
                s4, d4 = _create(d3, p)
                kk = index.get(d4)
                if kk is None or kk <= k:
                    continue
                ham[kk, k] = ham[k, kk] = s1 * s2 * s3 * s4 * val
    return ham


def raising_matrix(sector, target):
    """S+ = sum_p a+_{p,alpha} a_{p,beta} as a map from ``sector`` into ``target``."""
    n = sector.n_orbitals
    src = [sector.spin_orbital_bits(d) for d in sector.determinants()]
    dst = {target.spin_orbital_bits(d): k for k, d in enumerate(target.determinants())}
    mat = np.zeros((len(dst), len(src)))
    for k, d in enumerate(src):
        for p in range(n):
            if d >> (n + p) & 1 and not d >> p & 1:
                s1, d1 = _annihilate(d, n + p)
                s2, d2 = _create(d1, p)
                mat[dst[d2], k] += s1 * s2
    return mat


def s_squared_matrix(sector):
    sz = sector.sz
    diag = sz * sz + sz
    if sector.n_beta == 0 or sector.n_alpha == sector.n_orbitals:
        return diag * np.eye(sector.dim)
    up = Sector(sector.n_orbitals, sector.n_alpha + 1, sector.n_beta - 1,
                tuple(_strings(sector.n_orbitals, sector.n_alpha + 1)),
                tuple(_strings(sector.n_orbitals, sector.n_beta - 1)))
    sp_ = raising_matrix(sector, up)
    return sp_.T @ sp_ + diag * np.eye(sector.dim)


def orbital_transform_matrix(sector, u):
    """Many-body representation of the orbital map phi_q -> sum_p phi_p u_pq."""
    u = np.asarray(u, dtype=float)

    def string_rep(strings):
        occ = [_bits(s) for s in strings]
        return np.array([[np.linalg.det(u[np.ix_(oi, oj)]) if oi else 1.0 for oj in occ]
                         for oi in occ])

    return np.kron(string_rep(sector.alpha), string_rep(sector.beta))


# ---------------------------------------------------------------- states

def ket_label(det, n_orbitals):
    a, b = det
    out = []
    for p in range(n_orbitals):
        ai, bi = a >> p & 1, b >> p & 1
        out.append("2" if ai and bi else "1" if ai else "1" + BAR if bi else "0")
    return "|" + "".join(out) + "⟩"


def ascii_label(det, n_orbitals):
    return ket_label(det, n_orbitals).replace("1" + BAR, "b").replace("⟩", ">")


@dataclass(frozen=True, eq=False)
class CIState:
    energy: float
    sz: float
    s_squared: float
    coefficients: dict  # (alpha bits, beta bits) -> c
    n_orbitals: int
    label: str | None = None

    @property
    def spin(self):
        return 0.5 * (math.sqrt(1 + 4 * max(self.s_squared, 0.0)) - 1)

    @property
    def multiplicity(self):
        return int(round(2 * self.spin + 1))

    def coefficient(self, ket):
        """Coefficient of a determinant given as a label string such as "211"."""
        for det, c in self.coefficients.items():
            if ascii_label(det, self.n_orbitals)[1:-1] == ket:
                return c
        return 0.0

    def with_label(self, label):
        return CIState(self.energy, self.sz, self.s_squared, self.coefficients, self.n_orbitals,
                       label)


def _sign_fix(vec):
    """Largest |c| positive; among near-ties (1e-10) the first determinant decides."""
    a = np.abs(vec)
    k = int(np.flatnonzero(a >= a.max() - 1e-10)[0])
    return vec if vec[k] >= 0 else -vec


def _degenerate_blocks(energies, tol):
    blocks, start = [], 0
    for k in range(1, len(energies) + 1):
        if k == len(energies) or energies[k] - energies[k - 1] >= tol:
            blocks.append(list(range(start, k)))
            start = k
    return blocks


def fci_solve(space, sz=0.0, n_states=1, label_operator=None, degeneracy_tol=DEGENERACY_TOL):
    """Lowest ``n_states`` eigenstates of the (n_electrons, sz) sector.

    Within degenerate groups the eigenvectors are rotated to diagonalize S^2 and then
    the many-body representation of ``label_operator`` (an orbital matrix, typically
    a mirror) so that reported coefficients are reproducible.
    """
    sector = make_sector(space.n_orbitals, space.n_electrons, sz)
    if n_states < 1 or n_states > sector.dim:
        raise ValidationError(f"n_states={n_states} outside 1..{sector.dim} for this sector")
    ham = sector_hamiltonian(space, sector)
    evals, evecs = np.linalg.eigh(ham)
    s2 = s_squared_matrix(sector)
    lab = None
    if label_operator is not None:
        lab = orbital_transform_matrix(sector, label_operator)
        lab = 0.5 * (lab + lab.T)
    for block in _degenerate_blocks(evals, degeneracy_tol):
        if len(block) < 2:
            continue
        v = evecs[:, block]
        sub = v.T @ s2 @ v
        w, rot = np.linalg.eigh(0.5 * (sub + sub.T))
        v = v @ rot
        if lab is not None:
            # rotate only within groups sharing a total spin
            for grp in _degenerate_blocks(w, 1e-6):
                if len(grp) > 1:
                    vg = v[:, grp]
                    sub = vg.T @ lab @ vg
                    _, r2 = np.linalg.eigh(0.5 * (sub + sub.T))
                    v[:, grp] = vg @ r2
        evecs[:, block] = v
    dets = sector.determinants()
    out = []
    for k in range(n_states):
        vec = _sign_fix(evecs[:, k])
        vec = vec / np.linalg.norm(vec)
        out.append(CIState(
            energy=float(evals[k]),
            sz=sector.sz,
            s_squared=float(vec @ s2 @ vec),
            coefficients={d: float(c) for d, c in zip(dets, vec)},
            n_orbitals=space.n_orbitals,
        ))
    return out


# ---------------------------------------------------------------- reports

@dataclass(frozen=True, eq=False)
class SpectrumReport:
    states: tuple
    excitations: tuple  # E_n - E_0 for n >= 1
    degeneracy_groups: tuple
    tolerance: float = DEGENERACY_TOL
    meta: dict = field(default_factory=dict)

    @property
    def delta_e(self):
        return (0.0,) + tuple(self.excitations)

    def sectors(self):
        out = {}
        for k, s in enumerate(self.states):
            out.setdefault(s.sz, []).append(k)
        return out

    def group_of(self, k):
        for g in self.degeneracy_groups:
            if k in g:
                return g
        raise IndexError(k)

    def to_dict(self, threshold=0.05):
        states = []
        for k, s in enumerate(self.states):
            rep = ci_report(s, threshold)
            states.append({
                "index": k,
                "label": s.label,
                "energy": s.energy,
                "delta_e": self.delta_e[k],
                "sz": s.sz,
                "s_squared": s.s_squared,
                "configurations": [{"ket": r[0], "c": r[1]} for r in rep.rows],
                "weight": rep.weight,
            })
        return {"schema": SPECTRUM_SCHEMA, "states": states,
                "degeneracy_groups": [list(g) for g in self.degeneracy_groups],
                "tolerance": self.tolerance, **self.meta}

    def to_json(self, threshold=0.05):
        return json.dumps(self.to_dict(threshold), indent=2, sort_keys=True,
                          ensure_ascii=False) + "\n"


def order_states(states, degeneracy_tol=DEGENERACY_TOL):
    """Ascending energy, with a reproducible order inside degenerate groups.

    States from several S_z sectors can be degenerate to rounding noise; inside
    such a group they are ordered by descending S_z, then by input position, so
    a uniform energy shift never reorders them.
    """
    states = list(states)
    idx = sorted(range(len(states)), key=lambda k: states[k].energy)
    out, group = [], []
    for k in idx:
        if group and states[k].energy - states[group[0]].energy > degeneracy_tol:
            out += sorted(group, key=lambda j: (-states[j].sz, j))
            group = []
        group.append(k)
    out += sorted(group, key=lambda j: (-states[j].sz, j))
    return [states[k] for k in out]


def excitation_energies(states, degeneracy_tol=DEGENERACY_TOL):
    """Report relative to the first state; input must ascend up to ``degeneracy_tol``."""
    states = list(states)
    if not states:
        raise ValidationError("no states given")
    e = [s.energy for s in states]
    if any(b < a - degeneracy_tol for a, b in zip(e, e[1:])):
        raise ValidationError("states must be sorted by ascending energy")
    groups = _degenerate_blocks(np.array(e), degeneracy_tol)
    return SpectrumReport(tuple(states), tuple(x - e[0] for x in e[1:]),
                          tuple(tuple(g) for g in groups), degeneracy_tol)


@dataclass(frozen=True)
class CIReport:
    rows: tuple  # (ket label, coefficient)
    weight: float  # sum of c^2 over the reported rows


def ci_report(state, threshold=0.05):
    if not 0 < threshold < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    rows = [(ket_label(d, state.n_orbitals), c) for d, c in state.coefficients.items()
            if abs(c) >= threshold]
    rows.sort(key=lambda r: (-abs(r[1]), r[0]))
    return CIReport(tuple(rows), float(sum(c * c for _, c in rows)))


def fixed(x, digits):
    """Fixed-point text of ``x`` that never prints a negative zero."""
    return f"{round(x, digits) + 0.0:.{digits}f}"


def format_table(report, threshold=0.05, kets=None):
    """Aligned text table: one row per state, one column per configuration."""
    n = report.states[0].n_orbitals
    if kets is None:
        seen = []
        for s in report.states:
            for det, c in s.coefficients.items():
                lab = ket_label(det, n)
                if abs(c) >= threshold and lab not in seen:
                    seen.append(lab)
        kets = seen
    head = f"{'state':<8}{'dE':>12}{'S^2':>7}  " + "".join(f"{k:>9}" for k in kets) + f"{'sum c^2':>9}"
    lines = [head]
    for k, s in enumerate(report.states):
        coeffs = {ket_label(d, n): c for d, c in s.coefficients.items()}
        cells = "".join(f"{coeffs.get(kk, 0.0):>9.3f}" if abs(coeffs.get(kk, 0.0)) >= threshold
                        else f"{'':>9}" for kk in kets)
        w = sum(coeffs.get(kk, 0.0) ** 2 for kk in kets if abs(coeffs.get(kk, 0.0)) >= threshold)
        lines.append(f"{(s.label or '?'):<8}{fixed(report.delta_e[k], 6):>12}"
                     f"{fixed(s.s_squared, 3):>7}  "
                     f"{cells}{w:>9.3f}")
    return "\n".join(lines) + "\n"
