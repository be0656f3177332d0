"""Embedding-potential optimization by maximizing the extended Wu-Yang functional.

For a potential V in the shared density space

    W(V) = E[cl+cap1](V) + E[env+cap2](V) - <V, rho_full + rho_aux>
    dW/dV = rho[cl+cap1] + rho[env+cap2] - rho_full - rho_aux

where fragment densities are carried into the shared space by the adjoint of
each fragment's restriction map.  rho_full and rho_aux are solved once without
the embedding potential, which keeps W concave and makes the second line its
exact gradient.  Without caps (plain embedding) rho_aux vanishes.
"""

from __future__ import annotations

import json
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, ValidationError
from .field import ScalarField, SiteVector, sampling_matrix
from .meanfield import auxiliary_model, capped_model, severed_bonds, solve

OEP_SCHEMA = "embercap.oep.v1"


def thread_count():
    try:
        return max(1, int(os.environ.get("EMBERCAP_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- density spaces

class SiteSpace:
    """The full model's site basis; pairing is the plain dot product."""

    kind = "site"

    def __init__(self, model):
        self.size = model.n_sites
        self.basis_tag = model.basis_tag
        self.weight = 1.0
        self._hoppings = model.hoppings

    def restriction(self, frag_model, cap_potential="sampled"):
        r = np.zeros((frag_model.n_sites, self.size))
        anchors = frag_model.anchors
        caps = frag_model.cap_mask if frag_model.cap_mask is not None else np.zeros(len(anchors), bool)
        for k, a in enumerate(anchors):
            if caps[k] and cap_potential == "none":
                continue
            r[k, int(a)] = 1.0
        return r

    def laplacian(self):
        rows, cols, vals = [], [], []
        for i, j, _ in self._hoppings:
            rows += [i, j, i, j]
            cols += [i, j, j, i]
            vals += [1.0, 1.0, -1.0, -1.0]
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.size, self.size))

    def wrap(self, values):
        return SiteVector(values, self.basis_tag)


class GridSpace:
    """Periodic uniform grid; sites feel V through a sampling matrix."""

    kind = "grid"

    def __init__(self, dims, lattice, scheme="trilinear", width=0.5):
        self.dims = tuple(int(d) for d in dims)
        self.lattice = np.asarray(lattice, dtype=float)
        self.scheme = scheme
        self.width = width
        self.size = int(np.prod(self.dims))
        self.weight = abs(float(np.linalg.det(self.lattice))) / self.size

    def restriction(self, frag_model, cap_potential="sampled"):
        r = sampling_matrix(self.dims, self.lattice, frag_model.site_positions, self.scheme,
                            self.width)
        if cap_potential == "none" and frag_model.cap_mask is not None:
            r[np.asarray(frag_model.cap_mask, bool)] = 0.0
        return r

    def laplacian(self):
        n1, n2, n3 = self.dims
        idx = np.arange(self.size).reshape(self.dims)
        rows, cols = [], []
        for axis in range(3):
            if self.dims[axis] < 2:
                continue
            nb = np.roll(idx, -1, axis=axis)
            rows.append(idx.ravel())
            cols.append(nb.ravel())
        if not rows:
            return sp.csr_matrix((self.size, self.size))
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        a = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(self.size, self.size))
        a = a + a.T
        deg = np.asarray(a.sum(axis=1)).ravel()
        return (sp.diags(deg) - a).tocsr()

    def wrap(self, values):
        return ScalarField(self.dims, self.lattice, values, "potential")


# ---------------------------------------------------------------- problem

@dataclass(frozen=True, eq=False)
class Fragment:
    name: str
    model: object
    restriction: np.ndarray


@dataclass(frozen=True, eq=False)
class EmbeddingProblem:
    full_model: object
    cluster: Fragment
    environment: Fragment
    auxiliary: Fragment | None
    space: object
    full_restriction: np.ndarray
    cluster_sites: tuple = ()
    target: np.ndarray = field(init=False, repr=False)
    full_density: np.ndarray = field(init=False, repr=False)
    aux_density: np.ndarray = field(init=False, repr=False)
    full_energy: float = field(init=False)

    def __post_init__(self):
        n_full = self.full_model.total_electrons
        n_cl = self.cluster.model.total_electrons
        n_env = self.environment.model.total_electrons
        n_aux = self.auxiliary.model.total_electrons if self.auxiliary else 0.0
        if abs(n_cl + n_env - n_aux - n_full) > 1e-9:
            raise ValidationError(
                f"electron counts violate N_cl + N_env - N_aux = N_full: "
                f"{n_cl} + {n_env} - {n_aux} != {n_full}")
        nat = []
        for frag in (self.cluster, self.environment):
            m = frag.model
            mask = m.cap_mask if m.cap_mask is not None else np.zeros(m.n_sites, bool)
            nat += [int(a) for a, c in zip(m.anchors, mask) if not c]
        if sorted(nat) != list(range(self.full_model.n_sites)):
            raise ValidationError("native sites of the two fragments must tile the full model")
        w = self.space.weight
        full = solve(self.full_model)
        if not full.converged:
            raise ConvergenceError("full-system SCF did not converge (fragment 'full')")
        rho_full = self.full_restriction.T @ full.total_density / w
        rho_aux = np.zeros(self.space.size)
        if self.auxiliary is not None:
            aux = solve(self.auxiliary.model)
            if not aux.converged:
                raise ConvergenceError("auxiliary SCF did not converge (fragment 'auxiliary')")
            rho_aux = self.auxiliary.restriction.T @ aux.total_density / w
        object.__setattr__(self, "full_density", rho_full)
        object.__setattr__(self, "aux_density", rho_aux)
        object.__setattr__(self, "target", rho_full + rho_aux)
        object.__setattr__(self, "full_energy", full.energy)

    @property
    def fragments(self):
        return (self.cluster, self.environment)

    @property
    def size(self):
        return self.space.size


def build_embedding_problem(full_model, cluster_sites, *, capped=True, cap_onsite=0.0,
                            cap_potential="sampled", cluster_spin=None, space=None,
                            environment_spin_mode="restricted"):
    """Split ``full_model`` into capped cluster/environment fragments.

    Electrons beyond the nominal site valences (a charged defect) go to the cluster.
    ``cluster_spin`` is an optional (n_alpha, n_beta) pair, solved unrestricted.
    """
    cl = sorted(set(int(i) for i in cluster_sites))
    env = sorted(set(range(full_model.n_sites)) - set(cl))
    if not cl or not env:
        raise ValidationError("cluster and environment must both be nonempty")
    if cap_potential not in ("sampled", "none"):
        raise ValidationError(f"cap_potential must be 'sampled' or 'none', not {cap_potential!r}")
    extra = full_model.total_electrons - float(np.sum(full_model.site_valence()))
    cl_model = capped_model(full_model, cl, cap_onsite, extra_electrons=extra,
                            spin_counts=cluster_spin, name=f"{full_model.name}.cluster",
                            with_caps=capped)
    env_model = capped_model(full_model, env, cap_onsite, spin_mode=environment_spin_mode,
                             name=f"{full_model.name}.environment", with_caps=capped)
    aux_model = (auxiliary_model(full_model, cl, cap_onsite, name=f"{full_model.name}.auxiliary")
                 if capped else None)
    space = space if space is not None else SiteSpace(full_model)
    full_anchor = full_model.with_(anchors=np.arange(full_model.n_sites))
    return EmbeddingProblem(
        full_model=full_model,
        cluster=Fragment("cluster", cl_model, space.restriction(cl_model, cap_potential)),
        environment=Fragment("environment", env_model, space.restriction(env_model, cap_potential)),
        auxiliary=(Fragment("auxiliary", aux_model, space.restriction(aux_model, cap_potential))
                   if aux_model is not None else None),
        space=space,
        full_restriction=space.restriction(full_anchor),
        cluster_sites=tuple(cl),
    )


# ---------------------------------------------------------------- functional

@dataclass(frozen=True, eq=False)
class Evaluation:
    w: float
    gradient: np.ndarray  # density residual in the shared space
    results: dict


def _solve_fragment(frag, v):
    res = solve(frag.model, frag.restriction @ v)
    if not res.converged:
        raise ConvergenceError(f"SCF did not converge in fragment {frag.name!r}")
    return res


def evaluate(problem, v):
    """W and its gradient (a density difference in the shared space)."""
    v = np.asarray(v, dtype=float).ravel()
    if len(v) != problem.size:
        raise ValidationError(f"potential has {len(v)} components, space has {problem.size}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("potential contains non-finite values")
    frags = problem.fragments
    threads = thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(frags))) as pool:
            res = list(pool.map(lambda f: _solve_fragment(f, v), frags))
    else:
        res = [_solve_fragment(f, v) for f in frags]
    w = problem.space.weight
    grad = -problem.target.copy()
    total = 0.0
    for frag, r in zip(frags, res):
        total += r.energy
        grad += frag.restriction.T @ r.total_density / w
    total -= w * float(np.dot(v, problem.target))
    return Evaluation(total, grad, {f.name: r for f, r in zip(frags, res)})


def wu_yang_value_and_gradient(problem, v):
    ev = evaluate(problem, v)
    return ev.w, ev.gradient


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True, eq=False)
class OepResult:
    v_emb: np.ndarray
    w_value: float
    residual: np.ndarray
    residual_max: float
    iterations: int
    converged: bool
    trace: tuple  # (W, |grad|_inf) per iteration, starting at the initial point
    status: str
    n_evaluations: int = 0
    space: object = None

    def potential(self):
        return self.space.wrap(self.v_emb) if self.space is not None else self.v_emb

    def to_json(self):
        return json.dumps({
            "schema": OEP_SCHEMA,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "n_evaluations": self.n_evaluations,
            "w_value": self.w_value,
            "residual_max": self.residual_max,
            "v_emb": [float(x) for x in self.v_emb],
            "residual": [float(x) for x in self.residual],
        }, indent=2, sort_keys=True) + "\n"

    def trace_table(self):
        lines = ["iteration\tW\tgrad_inf"]
        for k, (wv, g) in enumerate(self.trace):
            lines.append(f"{k}\t{wv:.15e}\t{g:.6e}")
        return "\n".join(lines) + "\n"


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((a, rho))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (a, rho) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def optimize_vemb(problem, tolerance=1e-6, max_iter=500, regularization_weight=0.0,
                  gauge="mean-zero", basis=None, memory=10, v0=None, armijo=1e-4):
    """Limited-memory quasi-Newton ascent of W from V = 0 with backtracking.

    ``basis`` (shape size x k) restricts the search to V = basis @ x.  Convergence
    is declared when the (projected) gradient max-norm drops below ``tolerance``.
    """
    if tolerance <= 0:
        raise ValidationError("tolerance must be positive")
    if gauge not in ("mean-zero", "none"):
        raise ValidationError(f"unknown gauge {gauge!r}")
    n = problem.size
    b = None if basis is None else np.asarray(basis, dtype=float).reshape(n, -1)
    dim = n if b is None else b.shape[1]
    lap = problem.space.laplacian() if regularization_weight > 0 else None
    w8 = problem.space.weight
    n_eval = 0

    def full_v(x):
        return x if b is None else b @ x

    def objective(x):
        nonlocal n_eval
        n_eval += 1
        v = full_v(x)
        ev = evaluate(problem, v)
        w = ev.w
        raw = w8 * ev.gradient
        if lap is not None:
            lv = lap @ v
            w -= regularization_weight * float(np.dot(v, lv))
            raw = raw - 2 * regularization_weight * lv
        g = raw if b is None else b.T @ raw
        # minimize f = -W; report the gradient in density units for the stopping test
        return -w, -g, np.max(np.abs(g / w8)) if dim else 0.0, ev

    x = np.zeros(dim) if v0 is None else np.asarray(v0, dtype=float).ravel().copy()
    if b is not None and v0 is not None and len(x) != dim:
        raise ValidationError("v0 must live in the restricted basis coordinates")
    f, g, ginf, ev = objective(x)
    trace = [(-f, ginf)]
    s_hist, y_hist = deque(maxlen=memory), deque(maxlen=memory)
    status = "max_iter"
    converged = False
    it = 0
    for it in range(max_iter + 1):
        if ginf < tolerance:
            converged, status = True, "converged"
            break
        if it == max_iter:
            break
        step_ok = False
        for attempt in range(2):
            d = -_two_loop(g, list(s_hist), list(y_hist)) if s_hist else -g
            slope = float(np.dot(g, d))
            if slope >= 0:
                s_hist.clear()
                y_hist.clear()
                d, slope = -g, -float(np.dot(g, g))
            alpha = 1.0 if s_hist else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
            slack = 1e-13 * max(1.0, abs(f))
            for _ in range(50):
                try:
                    f_new, g_new, ginf_new, ev_new = objective(x + alpha * d)
                except ConvergenceError:
                    alpha *= 0.5
                    continue
                if f_new <= f + armijo * alpha * slope + slack:
                    step_ok = True
                    break
                alpha *= 0.5
            if step_ok:
                break
            if not s_hist:
                break
            s_hist.clear()
            y_hist.clear()
        if not step_ok:
            status = "line_search_failed"
            break
        s_vec = alpha * d
        y_vec = g_new - g
        if np.dot(s_vec, y_vec) > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
        x, f, g, ginf, ev = x + s_vec, f_new, g_new, ginf_new, ev_new
        trace.append((-f, ginf))
    v = full_v(x).copy()
    if gauge == "mean-zero":
        v -= v.mean()
    residual = ev.gradient
    return OepResult(
        v_emb=v,
        w_value=-f,
        residual=residual,
        residual_max=float(np.max(np.abs(residual))),
        iterations=it,
        converged=converged,
        trace=tuple(trace),
        status=status,
        n_evaluations=n_eval,
        space=problem.space,
    )


def severed_count(problem):
    return len(severed_bonds(problem.full_model, problem.cluster_sites))
