"""From an embedding potential to cluster excitation energies.

The cluster's mean-field orbitals (computed in the embedding potential, or
without it for a bare run) define a frozen core and an active window around
the Fermi level.  On-site repulsion U on the native sites supplies the
two-electron integrals; the potential enters the active one-body term through
``embed_one_body``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ValidationError
from .manybody import active_space_from_sites, embed_one_body, excitation_energies, fci_solve
from .meanfield import TightBindingModel, solve


@dataclass(frozen=True, eq=False)
class ClusterSpectrum:
    report: object
    space: object  # ActiveSpace, potential included
    orbitals: np.ndarray  # site -> active orbital coefficients

    @property
    def excitations(self):
        return self.report.excitations


def cluster_active_space(model, v_sites=None, n_active=4, n_active_electrons=4, u=1.0):
    """Active space of ``model`` with the site potential folded into its one-body part."""
    n_el = model.total_electrons
    n_core2 = n_el - n_active_electrons
    if n_core2 < 0 or abs(n_core2 / 2 - round(n_core2 / 2)) > 1e-9:
        raise ValidationError(f"{n_el} electrons cannot leave {n_active_electrons} active over a "
                              "doubly occupied core")
    n_core = int(round(n_core2 / 2))
    if n_core + n_active > model.n_sites:
        raise ValidationError(f"{n_core} core + {n_active} active orbitals exceed "
                              f"{model.n_sites} sites")
    v = np.zeros(model.n_sites) if v_sites is None else np.asarray(v_sites, dtype=float).ravel()
    mf = solve(model.with_(spin_mode="restricted", n_electrons=n_el), v)
    if not mf.converged:
        raise ConvergenceError(f"mean field of {model.name!r} did not converge")
    c = mf.orbital_coefficients[0]
    u_site = np.full(model.n_sites, float(u))
    if model.cap_mask is not None:
        u_site[np.asarray(model.cap_mask, dtype=bool)] = 0.0
    h_site = model.hopping_matrix() + np.diag(model.onsite)
    active = list(range(n_core, n_core + n_active))
    space = active_space_from_sites(h_site, u_site, c, active, n_active_electrons,
                                    core=range(n_core))
    c_act = c[:, active]
    return embed_one_body(space, v, c_act), c_act


def cluster_spectrum(model, v_sites=None, *, n_active=4, n_active_electrons=4, u=1.0, sz=0.0,
                     n_states=4):
    space, c_act = cluster_active_space(model, v_sites, n_active, n_active_electrons, u)
    states = fci_solve(space, sz, n_states)
    return ClusterSpectrum(excitation_energies(states), space, c_act)


def embedded_cluster_spectrum(problem, result=None, **kw):
    """Spectrum of the capped cluster of ``problem``; bare when ``result`` is None."""
    frag = problem.cluster
    v = None if result is None else frag.restriction @ np.asarray(result.v_emb)
    return cluster_spectrum(frag.model, v, **kw)


def ssh_defect_ring(n_cells, t_strong=-1.0, t_weak=-0.6, defect_onsite=(-0.4, -0.4),
                    spacing=1.5, smearing_width=0.02):
    """Dimerized ring of 2*n_cells sites, half filled, with onsite defects on sites 0, 1, ..."""
    n = 2 * n_cells
    if n_cells < 2:
        raise ValidationError("ring needs at least two cells")
    onsite = np.zeros(n)
    onsite[:len(defect_onsite)] = defect_onsite
    hops = [(i, (i + 1) % n, t_strong if i % 2 == 0 else t_weak) for i in range(n)]
    ang = 2 * np.pi * np.arange(n) / n
    r = spacing * n / (2 * np.pi)
    pos = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(n)], axis=1)
    return TightBindingModel(onsite, [(min(i, j), max(i, j), t) for i, j, t in hops], n,
                             site_positions=pos, smearing_width=smearing_width,
                             name=f"ssh{n}", valence=np.ones(n))


def ring_window(n_sites, center, half_width):
    """Sites center-half_width .. center+half_width-1 (mod n), a window of 2*half_width sites."""
    return sorted((center + k) % n_sites for k in range(-half_width, half_width))
