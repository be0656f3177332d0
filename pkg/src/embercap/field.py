"""Shared density space: periodic uniform grids and discrete site bases.

Grid point (i, j, k) sits at fractional coordinate (i/n1, j/n2, k/n3); values
are stored flat in C order.  Integrals use the midpoint rule, i.e. a sum times
the voxel volume.

Density file layout (plain text, one token group per line)::

    # embercap field v1
    kind density|potential
    lattice
      a1x a1y a1z
      a2x a2y a2z
      a3x a3y a3z
    dims n1 n2 n3
    electrons N          (density files only)
    values
    v v v v v v          (six per line, C order, %.17g)

Site-basis vectors use the same layout with ``basis TAG`` and ``sites N`` in
place of the lattice and dims entries.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError

FIELD_HEADER = "# embercap field v1"


@dataclass(frozen=True, eq=False)
class SiteVector:
    values: np.ndarray
    basis_tag: str

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValidationError("site vector contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class ScalarField:
    dims: tuple
    lattice: np.ndarray
    values: np.ndarray
    kind: str = "potential"
    n_electrons: float | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValidationError(f"grid dims must be three positive integers, got {dims}")
        lat = np.array(self.lattice, dtype=float).reshape(3, 3)
        vals = np.array(self.values, dtype=float).ravel()
        if len(vals) != math.prod(dims):
            raise ValidationError(f"{len(vals)} values for a {dims} grid (expected {math.prod(dims)})")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("field contains non-finite values")
        if self.kind not in ("density", "potential"):
            raise ValidationError(f"field kind must be density or potential, got {self.kind!r}")
        vals.flags.writeable = False
        lat.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "lattice", lat)
        object.__setattr__(self, "values", vals)
        if self.kind == "density" and self.n_electrons is not None:
            total = self.integral()
            if abs(total - self.n_electrons) > 1e-8 * max(1.0, abs(self.n_electrons)):
                raise ValidationError(
                    f"density integrates to {total!r}, declared {self.n_electrons!r} electrons")

    @property
    def size(self):
        return len(self.values)

    @property
    def voxel_volume(self):
        return abs(float(np.linalg.det(self.lattice))) / self.size

    def integral(self):
        return float(np.sum(self.values) * self.voxel_volume)

    def grid_points(self):
        return grid_points(self.dims, self.lattice)


def grid_fractional(dims):
    axes = [np.arange(n) / n for n in dims]
    return np.array(list(itertools.product(*axes)))


def grid_points(dims, lattice):
    return grid_fractional(dims) @ np.asarray(lattice)


def integrate_product(v, rho):
    """The pairing  integral V rho dr  (grid) or  sum_i V_i rho_i  (sites)."""
    if isinstance(v, SiteVector) and isinstance(rho, SiteVector):
        if v.basis_tag != rho.basis_tag:
            raise ValidationError(f"basis mismatch: {v.basis_tag!r} vs {rho.basis_tag!r}")
        if len(v) != len(rho):
            raise ValidationError(f"length mismatch: {len(v)} vs {len(rho)}")
        return float(np.dot(v.values, rho.values))
    if isinstance(v, ScalarField) and isinstance(rho, ScalarField):
        if v.dims != rho.dims:
            raise ValidationError(f"grid mismatch: {v.dims} vs {rho.dims}")
        if not np.allclose(v.lattice, rho.lattice, atol=1e-10):
            raise ValidationError("fields live on different cells")
        return float(np.dot(v.values, rho.values) * v.voxel_volume)
    raise ValidationError(
        f"cannot pair {type(v).__name__} with {type(rho).__name__}; representations must match")


# ---------------------------------------------------------------- projection

def _trilinear_rows(dims, lattice, positions):
    n = np.array(dims)
    frac = np.linalg.solve(np.asarray(lattice).T, np.asarray(positions, dtype=float).T).T
    u = np.mod(frac, 1.0) * n
    base = np.floor(u).astype(int)
    t = u - base
    rows = np.zeros((len(frac), int(np.prod(n))))
    for corner in itertools.product((0, 1), repeat=3):
        c = np.array(corner)
        idx = np.mod(base + c, n)
        flat = (idx[:, 0] * n[1] + idx[:, 1]) * n[2] + idx[:, 2]
        w = np.prod(np.where(c == 1, t, 1 - t), axis=1)
        np.add.at(rows, (np.arange(len(frac)), flat), w)
    return rows


def _gaussian_rows(dims, lattice, positions, width):
    """Gaussian kernel exp(-d^2 / 2 w^2) truncated at 3 w, rows normalized to 1."""
    lattice = np.asarray(lattice)
    pts = grid_points(dims, lattice)
    inv = np.linalg.inv(lattice)
    rows = np.zeros((len(positions), len(pts)))
    for s, r in enumerate(np.asarray(positions, dtype=float)):
        d = (pts - r) @ inv
        d -= np.round(d)
        dist2 = np.sum((d @ lattice) ** 2, axis=1)
        w = np.where(dist2 <= (3 * width) ** 2, np.exp(-dist2 / (2 * width ** 2)), 0.0)
        if w.sum() == 0.0:
            # kernel narrower than the grid: fall back to interpolation
            rows[s] = _trilinear_rows(dims, lattice, [r])[0]
        else:
            rows[s] = w / w.sum()
    return rows


def sampling_matrix(dims, lattice, positions, scheme="trilinear", width=0.5):
    """Linear map grid values -> site values; each row sums to one."""
    if len(positions) == 0:
        raise ValidationError("no site positions to project onto")
    if scheme == "trilinear":
        return _trilinear_rows(dims, lattice, positions)
    if scheme == "gaussian":
        if width <= 0:
            raise ValidationError("gaussian width must be positive")
        return _gaussian_rows(dims, lattice, positions, width)
    raise ValidationError(f"unknown projection scheme {scheme!r}")


def project_to_sites(field, positions, scheme="trilinear", width=0.5, basis_tag="sites"):
    rows = sampling_matrix(field.dims, field.lattice, positions, scheme, width)
    return SiteVector(rows @ field.values, basis_tag)


def density_from_sites(occupations, positions, dims, lattice, scheme="gaussian", width=0.5):
    """Spread site occupations on the grid so that the field integrates to their sum.

    This is the adjoint of ``sampling_matrix`` divided by the voxel volume, so
    integrate_product(V, density) equals sum_s n_s (S V)_s.
    """
    occ = np.asarray(occupations, dtype=float)
    rows = sampling_matrix(dims, lattice, positions, scheme, width)
    dv = abs(float(np.linalg.det(lattice))) / rows.shape[1]
    return ScalarField(dims, lattice, rows.T @ occ / dv, "density", float(occ.sum()))


# ---------------------------------------------------------------- file format

def write_density_file(field, kind="potential"):
    if isinstance(field, SiteVector):
        out = [FIELD_HEADER, f"kind {kind}", f"basis {field.basis_tag}", f"sites {len(field)}",
               "values"]
        vals = field.values
        for k in range(0, len(vals), 6):
            out.append(" ".join(f"{v:.17g}" for v in vals[k:k + 6]))
        return "\n".join(out) + "\n"
    out = [FIELD_HEADER, f"kind {field.kind}", "lattice"]
    for row in field.lattice:
        out.append("  " + " ".join(f"{v:.17g}" for v in row))
    out.append("dims {} {} {}".format(*field.dims))
    if field.n_electrons is not None:
        out.append(f"electrons {field.n_electrons:.17g}")
    out.append("values")
    vals = field.values
    for k in range(0, len(vals), 6):
        out.append(" ".join(f"{v:.17g}" for v in vals[k:k + 6]))
    return "\n".join(out) + "\n"


def read_density_file(text, source=None):
    lines = text.splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            ln = lines[pos]
            pos += 1
            s = ln.split("#", 1)[0].strip()
            if s:
                return s, pos
        raise ParseError("unexpected end of file", pos, source)

    kind, lat, dims, nel = "potential", None, None, None
    basis, nsites = None, None
    while True:
        s, ln = next_line()
        key, _, rest = s.partition(" ")
        if key == "kind":
            kind = rest.strip()
        elif key == "lattice":
            rows = []
            for _ in range(3):
                s, ln = next_line()
                try:
                    rows.append([float(x) for x in s.split()])
                except ValueError:
                    raise ParseError(f"bad lattice row {s!r}", ln, source) from None
                if len(rows[-1]) != 3:
                    raise ParseError("lattice row needs three numbers", ln, source)
            lat = np.array(rows)
        elif key == "dims":
            try:
                dims = tuple(int(x) for x in rest.split())
            except ValueError:
                raise ParseError(f"bad dims {rest!r}", ln, source) from None
            if len(dims) != 3 or any(d < 1 for d in dims):
                raise ParseError("dims needs three positive integers", ln, source)
        elif key == "electrons":
            try:
                nel = float(rest)
            except ValueError:
                raise ParseError(f"bad electron count {rest!r}", ln, source) from None
        elif key == "basis":
            basis = rest.strip()
        elif key == "sites":
            try:
                nsites = int(rest)
            except ValueError:
                raise ParseError(f"bad site count {rest!r}", ln, source) from None
        elif key == "values":
            break
        else:
            raise ParseError(f"unknown header key {key!r}", ln, source)
    if nsites is not None:
        expected = nsites
    elif lat is None or dims is None:
        raise ParseError("header must declare lattice and dims", pos, source)
    else:
        expected = math.prod(dims)
    vals = []
    for k in range(pos, len(lines)):
        for tok in lines[k].split():
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"bad value {tok!r}", k + 1, source) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {tok!r}", k + 1, source)
            vals.append(v)
            if len(vals) > expected:
                raise ParseError(f"more than the expected {expected} values", k + 1, source)
    if len(vals) != expected:
        what = f"dims {dims}" if nsites is None else f"{nsites} sites"
        raise ParseError(f"found {len(vals)} values, expected {expected} for {what}",
                         len(lines), source)
    if nsites is not None:
        return SiteVector(vals, basis or "sites")
    try:
        return ScalarField(dims, lat, vals, kind, nel)
    except ValidationError as exc:
        raise ParseError(str(exc), None, source) from None
