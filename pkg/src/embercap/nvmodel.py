"""Minimal C3v model of the negatively charged NV center.

Three orbitals in the order (a1, e_x, e_y) hold four electrons.  The ground
configuration a1^2 e^2 gives 3A2 + 1E + 1A1; a1^1 e^3 gives 3E (and a 1E that
mixes with the lower one).

Two-electron integrals (chemists' notation, e, e' in {x, y}, e != e'):

    (aa|aa) = coulomb_aa        (aa|ee) = coulomb_ae      (ae|ae) = exchange_ae
    (ee|ee) = coulomb_ee_same   (ee|e'e') = coulomb_ee_cross
    (ee'|ee') = exchange_ee

For real e orbitals the pair (e_x, e_y) is rotationally consistent only when
coulomb_ee_same = coulomb_ee_cross + 2 exchange_ee: rotating the pair by an
angle t mixes (xx|xx) into (xx|yy) and (xy|xy) with weights that cancel
exactly under that identity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ParseError, ValidationError
from .manybody import ActiveSpace, ascii_label, excitation_energies, fci_solve, order_states

PARAMS_HEADER = "# embercap nv-model parameters v1"
TRIPLET, SINGLET = 2.0, 0.0
SPIN_TOL = 1e-6


@dataclass(frozen=True)
class NvModelParams:
    gap: float
    coulomb_aa: float
    coulomb_ae: float
    coulomb_ee_same: float
    coulomb_ee_cross: float
    exchange_ae: float
    exchange_ee: float
    eps_a1: float = 0.0

    def violations(self, tol=1e-12):
        out = []
        lhs = self.coulomb_ee_same
        rhs = self.coulomb_ee_cross + 2 * self.exchange_ee
        if abs(lhs - rhs) > tol:
            out.append(f"coulomb_ee_same = coulomb_ee_cross + 2*exchange_ee violated: "
                       f"{lhs!r} != {self.coulomb_ee_cross!r} + 2*{self.exchange_ee!r} = {rhs!r}")
        for name in ("coulomb_aa", "coulomb_ae", "coulomb_ee_same", "coulomb_ee_cross",
                     "exchange_ae", "exchange_ee"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)!r}")
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                out.append(f"{f.name} is not finite")
        return out

    @property
    def eps_e(self):
        return self.eps_a1 + self.gap

    @classmethod
    def symmetric(cls, gap, coulomb_aa, coulomb_ae, coulomb_ee_cross, exchange_ae, exchange_ee,
                  eps_a1=0.0):
        """Parameters with coulomb_ee_same fixed by the degeneracy identity."""
        return cls(gap, coulomb_aa, coulomb_ae, coulomb_ee_cross + 2 * exchange_ee,
                   coulomb_ee_cross, exchange_ae, exchange_ee, eps_a1)


def build_nv_active_space(params, enforce=True):
    """(4e, 3o) active space.  ``enforce=False`` admits symmetry-breaking parameter sets."""
    problems = params.violations()
    if enforce and problems:
        raise ValidationError("; ".join(problems))
    h = np.diag([params.eps_a1, params.eps_e, params.eps_e])
    eri = np.zeros((3, 3, 3, 3))

    def put(p, q, r, s, v):
        for a, b, c, d in {(p, q, r, s), (q, p, r, s), (p, q, s, r), (q, p, s, r),
                           (r, s, p, q), (s, r, p, q), (r, s, q, p), (s, r, q, p)}:
            eri[a, b, c, d] = v

    put(0, 0, 0, 0, params.coulomb_aa)
    for e in (1, 2):
        put(0, 0, e, e, params.coulomb_ae)
        put(0, e, 0, e, params.exchange_ae)
        put(e, e, e, e, params.coulomb_ee_same)
    put(1, 1, 2, 2, params.coulomb_ee_cross)
    put(1, 2, 1, 2, params.exchange_ee)
    return ActiveSpace(3, 4, h, eri, 0.0)


def mirror_operator(angle_deg=60.0):
    """Orbital matrix of the vertical mirror through the direction at ``angle_deg``.

    The e pair transforms as (x, y); a1 is invariant.  The mirror at 60 degrees
    is used to pick reproducible partners inside degenerate E pairs: it mixes
    the two real 1E components so both carry |202> and |220> weight.
    """
    t = math.radians(2 * angle_deg)
    return np.array([[1.0, 0, 0], [0, math.cos(t), math.sin(t)], [0, math.sin(t), -math.cos(t)]])


def nv_spectrum(space, n_singlets=3, label_operator=None):
    """Triplets from the S_z = 1 sector plus the lowest singlets of S_z = 0, sorted by energy."""
    op = mirror_operator() if label_operator is None else label_operator
    trip = fci_solve(space, 1.0, 3, label_operator=op)
    zero = fci_solve(space, 0.0, 9, label_operator=op)
    sing = [s for s in zero if abs(s.s_squared - SINGLET) < SPIN_TOL][:n_singlets]
    return excitation_energies(order_states(trip + sing))


def _coef(state, ket):
    return state.coefficient(ket)


def classify_states(report, threshold=0.05):
    """Attach term labels; anything not matching a clean pattern stays "unassigned"."""
    labels = ["unassigned"] * len(report.states)
    flags = {}
    mixed = any(len({round(report.states[k].s_squared) for k in g}) > 1
                for g in report.degeneracy_groups)
    # a group holding several spin multiplets means the term pattern has collapsed
    for group in () if mixed else report.degeneracy_groups:
        spins = [report.states[k].s_squared for k in group]
        trip = all(abs(s - TRIPLET) < SPIN_TOL for s in spins)
        sing = all(abs(s - SINGLET) < SPIN_TOL for s in spins)
        if trip and len(group) == 1:
            st = report.states[group[0]]
            dom = max(st.coefficients.items(), key=lambda kv: abs(kv[1]))[0]
            if ascii_label(dom, st.n_orbitals) == "|211>" and abs(_coef(st, "211")) ** 2 >= 0.5:
                labels[group[0]] = "3A2"
        elif trip and len(group) == 2:
            for k in group:
                labels[k] = "3E"
        elif sing and len(group) == 2:
            ok = all(_coef(report.states[k], "202") * _coef(report.states[k], "220") < 0
                     and min(abs(_coef(report.states[k], "202")),
                             abs(_coef(report.states[k], "220"))) >= threshold
                     for k in group)
            if ok:
                for k in group:
                    labels[k] = "1E"
        elif sing and len(group) == 1:
            st = report.states[group[0]]
            c202, c220 = _coef(st, "202"), _coef(st, "220")
            if c202 * c220 > 0 and min(abs(c202), abs(c220)) >= threshold:
                labels[group[0]] = "1A1"
                if abs(_coef(st, "022")) >= threshold:
                    flags[group[0]] = ["double-excitation |022>"]
    states = tuple(s.with_label(lab) for s, lab in zip(report.states, labels))
    meta = dict(report.meta)
    meta["flags"] = {str(k): v for k, v in sorted(flags.items())}
    return type(report)(states, report.excitations, report.degeneracy_groups, report.tolerance,
                        meta)


def term_energies(report):
    """Lowest energy per assigned label."""
    out = {}
    for s in report.states:
        if s.label and s.label != "unassigned":
            out.setdefault(s.label, s.energy)
    return out


EXPECTED_ORDER = ("3A2", "1E", "1A1", "3E")


def has_reference_structure(report):
    labs = [s.label for s in report.states]
    if sorted(labs) != sorted(["3A2", "3E", "3E", "1E", "1E", "1A1"]):
        return False
    e = term_energies(report)
    return all(e[a] < e[b] for a, b in zip(EXPECTED_ORDER, EXPECTED_ORDER[1:]))


# ---------------------------------------------------------------- parameter files

def write_params(params, comment=None):
    out = [PARAMS_HEADER]
    if comment:
        out += [f"# {line}" for line in comment.splitlines()]
    for k, v in asdict(params).items():
        out.append(f"{k} {v!r}")
    return "\n".join(out) + "\n"


def parse_params(text, source=None, enforce=True):
    names = {f.name for f in fields(NvModelParams)}
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 2:
            raise ParseError(f"expected 'key value', got {raw.strip()!r}", lineno, source)
        key, val = toks
        if key not in names:
            raise ParseError(f"unknown parameter {key!r}", lineno, source)
        if key in vals:
            raise ParseError(f"duplicate parameter {key!r}", lineno, source)
        try:
            vals[key] = float(val)
        except ValueError:
            raise ParseError(f"bad number {val!r} for {key}", lineno, source) from None
    missing = sorted(names - set(vals) - {"eps_a1"})
    if missing:
        raise ParseError(f"missing parameters: {', '.join(missing)}", None, source)
    params = NvModelParams(**vals)
    problems = params.violations()
    if enforce and problems:
        raise ParseError("; ".join(problems), None, source)
    return params


def reference_params():
    from importlib.resources import files

    text = files("embercap").joinpath("data").joinpath("nv_reference.params").read_text()
    return parse_params(text, "nv_reference.params")


# ---------------------------------------------------------------- coarse scan

def scan(grid, min_margin=0.02, min_022=0.05):
    """Brute-force FCI over a grid of parameter tuples.

    ``grid`` maps (gap, coulomb_aa, coulomb_ae, coulomb_ee_cross, exchange_ae,
    exchange_ee) names to candidate values.  Returns (score, params) pairs with
    the target ordering, best first; the score is the smallest gap between
    consecutive terms, so well-separated sets rank first.
    """
    import itertools

    keys = ("gap", "coulomb_aa", "coulomb_ae", "coulomb_ee_cross", "exchange_ae", "exchange_ee")
    hits = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        p = NvModelParams.symmetric(*combo)
        rep = classify_states(nv_spectrum(build_nv_active_space(p)))
        if not has_reference_structure(rep):
            continue
        a1 = next(s for s in rep.states if s.label == "1A1")
        if _coef(a1, "022") ** 2 < min_022:
            continue
        e = term_energies(rep)
        margin = min(e[b] - e[a] for a, b in zip(EXPECTED_ORDER, EXPECTED_ORDER[1:]))
        if margin >= min_margin:
            hits.append((margin, p))
    hits.sort(key=lambda t: -t[0])
    return hits
