"""Periodic crystal structures: parsing, supercells, defects and bond graphs.

Site ordering is stable through every operation here.  ``build_supercell``
emits original-site-major / image-minor order and ``make_nv_defect``
deletes the vacancy and compacts the indices above it by one.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .elements import check_symbol, composition
from .errors import ParseError, ValidationError

DEFAULT_CUTOFF = 1.8
DIAMOND_A = 3.5677


def _wrap(frac, pbc):
    frac = np.array(frac, dtype=float)
    for k in range(3):
        if pbc[k]:
            col = np.mod(frac[:, k], 1.0)
            col[col >= 1.0] = 0.0
            frac[:, k] = col
    return frac


@dataclass(frozen=True, eq=False)
class CrystalCell:
    lattice: np.ndarray
    symbols: tuple
    frac: np.ndarray
    pbc: tuple = (True, True, True)

    def __post_init__(self):
        lat = np.array(self.lattice, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(lat)):
            raise ValidationError("lattice contains non-finite values")
        if abs(np.linalg.det(lat)) <= 1e-9:
            raise ValidationError("lattice matrix is singular (|det| <= 1e-9)")
        symbols = tuple(check_symbol(s) for s in self.symbols)
        frac = np.array(self.frac, dtype=float).reshape(-1, 3)
        if len(frac) != len(symbols):
            raise ValidationError(f"{len(symbols)} symbols but {len(frac)} coordinates")
        if not np.all(np.isfinite(frac)):
            raise ValidationError("non-finite fractional coordinate")
        pbc = tuple(bool(p) for p in self.pbc)
        frac = _wrap(frac, pbc)
        lat.flags.writeable = False
        frac.flags.writeable = False
        object.__setattr__(self, "lattice", lat)
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "frac", frac)
        object.__setattr__(self, "pbc", pbc)

    def __len__(self):
        return len(self.symbols)

    @property
    def cart(self):
        return self.frac @ self.lattice

    @property
    def volume(self):
        return abs(float(np.linalg.det(self.lattice)))

    @property
    def formula(self):
        order = sorted(set(self.symbols), key=self.symbols.index)
        return composition(self.symbols, order)

    def counts(self):
        out = {}
        for s in self.symbols:
            out[s] = out.get(s, 0) + 1
        return out

    def same_as(self, other, tol=1e-8):
        if self.symbols != other.symbols or self.pbc != other.pbc:
            return False
        if not np.allclose(self.lattice, other.lattice, atol=tol, rtol=0):
            return False
        d = self.frac - other.frac
        d -= np.round(d) * np.array(self.pbc)
        return bool(np.all(np.abs(d) <= tol))


def cartesian_to_fractional(lattice, cart):
    # rows are lattice vectors: cart = frac @ lattice
    return np.linalg.solve(np.asarray(lattice, dtype=float).T, np.asarray(cart, dtype=float).T).T


def diamond_conventional(a=DIAMOND_A, element="C"):
    fcc = np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    frac = np.vstack([fcc, fcc + 0.25])
    return CrystalCell(a * np.eye(3), (element,) * 8, frac)


def diamond_primitive(a=DIAMOND_A, element="C"):
    lat = 0.5 * a * np.array([[0.0, 1, 1], [1, 0, 1], [1, 1, 0]])
    return CrystalCell(lat, (element,) * 2, [[0, 0, 0], [0.25, 0.25, 0.25]])


# ---------------------------------------------------------------- parsing

def _floats(tokens, lineno, n=None):
    if n is not None and len(tokens) < n:
        raise ParseError(f"expected {n} numbers, got {len(tokens)}", lineno)
    vals = []
    for tok in tokens[: n if n is not None else len(tokens)]:
        try:
            v = float(tok)
        except ValueError:
            raise ParseError(f"cannot parse number {tok!r}", lineno) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite number {tok!r}", lineno)
        vals.append(v)
    return vals


def parse_structure(text, fmt=None):
    """Parse a VASP-style structure file or an extended-XYZ file with a lattice header.

    The format is sniffed from the content unless ``fmt`` is "vasp" or "xyz".
    """
    lines = text.splitlines()
    if fmt is None:
        fmt = "xyz" if len(lines) > 1 and "Lattice=" in lines[1] else "vasp"
    if fmt == "vasp":
        return _parse_vasp(lines)
    if fmt == "xyz":
        return _parse_extxyz(lines)
    raise ValueError(f"unknown structure format {fmt!r}")


def _parse_vasp(lines):
    if len(lines) < 8:
        raise ParseError(f"structure file too short ({len(lines)} lines)", len(lines) or 1)
    scale = _floats(lines[1].split(), 2, 1)[0]
    lat = np.array([_floats(lines[2 + k].split(), 3 + k, 3) for k in range(3)])
    if scale == 0:
        raise ParseError("scale factor must be nonzero", 2)
    if scale < 0:
        vol = abs(np.linalg.det(lat))
        if vol <= 1e-12:
            raise ParseError("lattice matrix is singular", 3)
        scale = (-scale / vol) ** (1.0 / 3.0)
    lat *= scale
    species = lines[5].split()
    if not species or any(re.fullmatch(r"[A-Z][a-z]?", s) is None for s in species):
        raise ParseError(f"malformed species line {lines[5]!r}", 6)
    try:
        counts = [int(t) for t in lines[6].split()]
    except ValueError:
        raise ParseError(f"malformed counts line {lines[6]!r}", 7) from None
    if len(counts) != len(species):
        raise ParseError(
            f"species/count mismatch: {len(species)} species, {len(counts)} counts", 7
        )
    if any(c < 0 for c in counts):
        raise ParseError("negative atom count", 7)
    idx = 7
    if lines[idx].strip()[:1] in ("S", "s"):
        idx += 1
    mode = lines[idx].strip()[:1].lower()
    if mode == "d":
        cartesian = False
    elif mode in ("c", "k"):
        cartesian = True
    else:
        raise ParseError(f"expected 'Direct' or 'Cartesian', got {lines[idx].strip()!r}", idx + 1)
    natoms = sum(counts)
    coords = []
    for k in range(natoms):
        ln = idx + 1 + k
        if ln >= len(lines):
            raise ParseError(f"expected {natoms} coordinate lines, found {k}", ln)
        coords.append(_floats(lines[ln].split(), ln + 1, 3))
    symbols = []
    for s, c in zip(species, counts):
        try:
            check_symbol(s)
        except ValueError as exc:
            raise ParseError(str(exc), 6) from None
        symbols += [s] * c
    coords = np.array(coords, dtype=float).reshape(-1, 3)
    if abs(np.linalg.det(lat)) <= 1e-9:
        raise ParseError("lattice matrix is singular", 3)
    if cartesian:
        coords = cartesian_to_fractional(lat, coords * scale)
    return CrystalCell(lat, symbols, coords)


_KV = re.compile(r'(\w+)=("([^"]*)"|\S+)')


def _parse_extxyz(lines):
    try:
        n = int(lines[0].split()[0])
    except (ValueError, IndexError):
        raise ParseError("first line must be the atom count", 1) from None
    header = {m.group(1): (m.group(3) if m.group(3) is not None else m.group(2))
              for m in _KV.finditer(lines[1])}
    if "Lattice" not in header:
        raise ParseError("missing Lattice=... in header", 2)
    lat = np.array(_floats(header["Lattice"].split(), 2, 9)).reshape(3, 3)
    pbc = (True, True, True)
    if "pbc" in header:
        flags = header["pbc"].split()
        if len(flags) != 3:
            raise ParseError("pbc must have three flags", 2)
        pbc = tuple(f.upper() in ("T", "TRUE", "1") for f in flags)
    if len(lines) < 2 + n:
        raise ParseError(f"expected {n} atom lines, found {len(lines) - 2}", len(lines))
    symbols, cart = [], []
    for k in range(n):
        toks = lines[2 + k].split()
        if not toks:
            raise ParseError("empty atom line", 3 + k)
        try:
            symbols.append(check_symbol(toks[0]))
        except ValueError as exc:
            raise ParseError(str(exc), 3 + k) from None
        cart.append(_floats(toks[1:], 3 + k, 3))
    if abs(np.linalg.det(lat)) <= 1e-9:
        raise ParseError("lattice matrix is singular", 2)
    frac = cartesian_to_fractional(lat, np.array(cart).reshape(-1, 3))
    return CrystalCell(lat, symbols, frac, pbc)


def _num(x):
    return f"{x:.16g}" if x != 0 else "0"


def emit_structure(cell, fmt="vasp", comment=None):
    """Serialize ``cell``; coordinates are written with full double precision."""
    if fmt == "xyz":
        return emit_xyz(cell.symbols, cell.cart, lattice=cell.lattice, pbc=cell.pbc,
                        comment=comment)
    if fmt != "vasp":
        raise ValueError(f"unknown structure format {fmt!r}")
    runs = [(s, len(list(g))) for s, g in itertools.groupby(cell.symbols)]
    out = [comment if comment is not None else cell.formula, "1.0"]
    for row in cell.lattice:
        out.append("  " + " ".join(f"{_num(v):>22}" for v in row))
    out.append("  " + " ".join(f"{s:>4}" for s, _ in runs))
    out.append("  " + " ".join(f"{c:>4d}" for _, c in runs))
    out.append("Direct")
    for row in cell.frac:
        out.append("  " + " ".join(f"{_num(v):>22}" for v in row))
    return "\n".join(out) + "\n"


def emit_xyz(symbols, positions, lattice=None, pbc=(True, True, True), comment=None,
             extra_columns=None):
    """Extended-XYZ writer.  ``extra_columns`` maps a property name to one string per atom."""
    props = "species:S:1:pos:R:3"
    extra_columns = extra_columns or {}
    for name in extra_columns:
        props += f":{name}:S:1"
    head = []
    if lattice is not None:
        lat = " ".join(_num(v) for v in np.asarray(lattice).ravel())
        head.append(f'Lattice="{lat}"')
        head.append('pbc="' + " ".join("T" if p else "F" for p in pbc) + '"')
    head.append(f"Properties={props}")
    if comment:
        head.append(f'comment="{comment}"')
    lines = [str(len(symbols)), " ".join(head)]
    for k, (s, r) in enumerate(zip(symbols, np.asarray(positions).reshape(-1, 3))):
        row = f"{s:<2} " + " ".join(f"{_num(v):>22}" for v in r)
        for col in extra_columns.values():
            row += f" {col[k]}"
        lines.append(row)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- editing

def build_supercell(cell, reps):
    reps = tuple(int(r) for r in reps)
    if len(reps) != 3 or any(r < 1 for r in reps):
        raise ValidationError(f"supercell repetitions must be three integers >= 1, got {reps}")
    images = np.array(list(itertools.product(*(range(r) for r in reps))), dtype=float)
    n_img = len(images)
    frac = (cell.frac[:, None, :] + images[None, :, :]) / np.array(reps, dtype=float)
    symbols = tuple(s for s in cell.symbols for _ in range(n_img))
    lattice = cell.lattice * np.array(reps, dtype=float)[:, None]
    return CrystalCell(lattice, symbols, frac.reshape(-1, 3), cell.pbc)


def remove_sites(cell, indices):
    drop = set(int(i) for i in indices)
    keep = [i for i in range(len(cell)) if i not in drop]
    return CrystalCell(cell.lattice, [cell.symbols[i] for i in keep], cell.frac[keep], cell.pbc)


def substitute(cell, index, element):
    symbols = list(cell.symbols)
    symbols[index] = element
    return CrystalCell(cell.lattice, symbols, cell.frac, cell.pbc)


def make_nv_defect(cell, vacancy_site, substitution_site, cutoff=DEFAULT_CUTOFF, graph=None):
    """Remove ``vacancy_site`` and turn the bonded ``substitution_site`` into N.

    Returns the defective cell; the substitution index shifts down by one when it
    lies above the vacancy.
    """
    n = len(cell)
    for i in (vacancy_site, substitution_site):
        if not 0 <= i < n:
            raise ValidationError(f"site index {i} out of range for {n} sites")
    bad = [i for i in (vacancy_site, substitution_site) if cell.symbols[i] != "C"]
    if bad:
        raise ValidationError(f"NV defect needs carbon sites; non-carbon site(s) {bad}")
    if vacancy_site == substitution_site:
        raise ValidationError(f"vacancy and substitution are the same site {vacancy_site}")
    graph = graph if graph is not None else neighbor_graph(cell, cutoff)
    if substitution_site not in graph.neighbors(vacancy_site):
        raise ValidationError(
            f"sites {vacancy_site} and {substitution_site} are not bonded (cutoff {graph.cutoff} A)"
        )
    sub = substitution_site - (1 if substitution_site > vacancy_site else 0)
    return substitute(remove_sites(cell, [vacancy_site]), sub, "N")


# ---------------------------------------------------------------- bonding

@dataclass(frozen=True, eq=False)
class BondGraph:
    adjacency: tuple
    cutoff: float
    n_sites: int = field(default=0)

    def neighbors(self, i):
        return sorted({j for j, _, _ in self.adjacency[i]})

    def degree(self, i):
        return len(self.adjacency[i])

    def degrees(self):
        return [len(a) for a in self.adjacency]

    def degree_histogram(self):
        hist = {}
        for d in self.degrees():
            hist[d] = hist.get(d, 0) + 1
        return dict(sorted(hist.items()))

    def edges(self):
        """Each undirected bond once, as (i, j, offset, distance) with i <= j."""
        out = []
        for i, adj in enumerate(self.adjacency):
            for j, off, d in adj:
                if i < j or (i == j and off > tuple(-o for o in off)):
                    out.append((i, j, off, d))
        return out

    def is_symmetric(self):
        entries = {(i, j, off) for i, adj in enumerate(self.adjacency) for j, off, _ in adj}
        return all((j, i, tuple(-o for o in off)) in entries for i, j, off in entries)


def _image_range(lattice, cutoff, pbc):
    # planes of lattice direction k are spaced 1/|b_k| apart (b = reciprocal rows)
    recip = np.linalg.inv(lattice).T
    ranges = []
    for k in range(3):
        if not pbc[k]:
            ranges.append(range(0, 1))
            continue
        m = int(math.ceil(cutoff * np.linalg.norm(recip[k])))
        ranges.append(range(-m, m + 1))
    return ranges


def neighbor_graph(cell, cutoff=DEFAULT_CUTOFF):
    """All bonds within ``cutoff`` over every periodic image that can reach it.

    The image range is derived from the interplanar spacings, so cutoffs larger
    than half the cell extent simply widen the search.
    """
    if cutoff <= 0:
        raise ValidationError("cutoff must be positive")
    cart = cell.cart
    n = len(cart)
    adj = [[] for _ in range(n)]
    for off in itertools.product(*_image_range(cell.lattice, cutoff, cell.pbc)):
        shift = np.array(off, dtype=float) @ cell.lattice
        d = np.linalg.norm(cart[None, :, :] + shift - cart[:, None, :], axis=-1)
        ii, jj = np.nonzero(d <= cutoff)
        for i, j in zip(ii, jj):
            if i == j and not any(off):
                continue
            adj[i].append((int(j), tuple(int(o) for o in off), float(d[i, j])))
    for a in adj:
        a.sort()
    return BondGraph(tuple(tuple(a) for a in adj), float(cutoff), n)


def is_pristine_diamond(graph):
    return all(d == 4 for d in graph.degrees())
