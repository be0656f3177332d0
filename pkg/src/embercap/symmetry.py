"""Continuous symmetry measure (CSM) for point groups with a principal axis.

The score of a structure Q (centered on its centroid) for group G is

    S = sum_i |Q_i - P_i|^2 / sum_i |Q_i|^2

where P is the G-symmetric structure obtained by folding/unfolding: for each
operation g an atom permutation pi_g maps g Q_i onto its nearest like atom, and
P_i = (1/|G|) sum_g g^-1 Q_{pi_g(i)}.  S is minimized over the placement of the
symmetry elements (axis direction and mirror orientation).  S is dimensionless,
lies in [0, 1], and is 0 exactly for G-symmetric structures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares, linear_sum_assignment

from .errors import ValidationError

SUPPORTED_GROUPS = ("C3v",)
DEFAULT_THRESHOLD = 1e-3


def _local_ops(group):
    if group != "C3v":
        raise ValidationError(f"unsupported point group {group!r}; supported: {SUPPORTED_GROUPS}")
    ops = []
    for k in range(3):
        a = 2 * np.pi * k / 3
        c, s = np.cos(a), np.sin(a)
        ops.append(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]))
    for k in range(3):
        # vertical mirror containing the z axis and the direction at angle k*60 deg
        t = 2 * (np.pi * k / 3)
        c, s = np.cos(t), np.sin(t)
        ops.append(np.array([[c, s, 0], [s, -c, 0], [0, 0, 1]]))
    return ops


def _frame(angles):
    theta, phi, psi = angles
    axis = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    ref = np.cos(psi) * u + np.sin(psi) * v
    return np.array([ref, np.cross(axis, ref), axis])


def _angles_from_axis(axis):
    axis = axis / np.linalg.norm(axis)
    return np.arccos(np.clip(axis[2], -1, 1)), np.arctan2(axis[1], axis[0])


def group_operations(group, angles):
    r = _frame(angles)
    return [r.T @ op @ r for op in _local_ops(group)]


def _assign(ops, q, species):
    perms = []
    for g in ops:
        gq = q @ g.T
        cost = np.sum((gq[:, None, :] - q[None, :, :]) ** 2, axis=-1)
        cost = np.where(species[:, None] == species[None, :], cost, 1e12)
        _, cols = linear_sum_assignment(cost)
        perms.append(cols)
    return perms


def symmetrize(ops, q, perms):
    p = np.zeros_like(q)
    for g, perm in zip(ops, perms):
        p += q[perm] @ g  # g^-1 = g^T for orthogonal g
    return p / len(ops)


def _score(q, p, norm):
    return float(np.sum((q - p) ** 2) / norm)


@dataclass(frozen=True)
class SymmetryResult:
    score: float
    group: str
    axis: np.ndarray
    mirror_direction: np.ndarray
    symmetrized: np.ndarray  # centered coordinates of the nearest symmetric structure
    centroid: np.ndarray

    def is_symmetric(self, threshold=DEFAULT_THRESHOLD):
        return self.score < threshold


def _prepare(positions, species):
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(pos) == 0:
        raise ValidationError("symmetry measure of an empty fragment")
    species = np.asarray(species if species is not None else ["X"] * len(pos))
    centroid = pos.mean(axis=0)
    q = pos - centroid
    return q, species, centroid


def csm_for_assignment(positions, species, group, perms, angles0):
    """Score with a fixed permutation set, minimized over orientation only."""
    q, species, _ = _prepare(positions, species)
    norm = float(np.sum(q ** 2))

    def resid(a):
        ops = group_operations(group, a)
        return ((q - symmetrize(ops, q, perms)) / np.sqrt(norm)).ravel()

    sol = least_squares(resid, angles0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return float(np.sum(sol.fun ** 2)), sol.x


def symmetry_detail(positions, species=None, group="C3v"):
    q, species, centroid = _prepare(positions, species)
    _local_ops(group)
    norm = float(np.sum(q ** 2))
    if len(q) == 1 or norm < 1e-20:
        ops = group_operations(group, (0.0, 0.0, 0.0))
        return SymmetryResult(0.0, group, np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), q,
                              centroid)
    sv = np.linalg.svd(q, compute_uv=False)
    if sv[1] <= 1e-8 * sv[0]:
        raise ValidationError("degenerate geometry: all atoms collinear, C3v axis search is ill-posed")

    def evaluate(a):
        ops = group_operations(group, a)
        perms = _assign(ops, q, species)
        return _score(q, symmetrize(ops, q, perms), norm), perms

    # candidate axes: principal axes of the point cloud and the centroid-to-atom directions
    _, vecs = np.linalg.eigh(q.T @ q)
    axes = [vecs[:, k] for k in range(3)]
    for r in q:
        if np.linalg.norm(r) > 1e-6 * np.sqrt(norm):
            axes.append(r)
    starts = []
    for ax in axes:
        th, ph = _angles_from_axis(ax)
        for psi in np.linspace(0, np.pi / 3, 12, endpoint=False):
            a = np.array([th, ph, psi])
            starts.append((evaluate(a)[0], a))
    starts.sort(key=lambda t: t[0])

    best = (np.inf, None)
    for _, a in starts[:6]:
        for _ in range(8):
            s, perms = evaluate(a)
            s_new, a_new = csm_for_assignment(q, species, group, perms, a)
            if s_new >= s - 1e-15:
                a = a_new if s_new < s else a
                break
            a = a_new
        s, _ = evaluate(a)
        if s < best[0]:
            best = (s, a)
    s, a = best
    ops = group_operations(group, a)
    perms = _assign(ops, q, species)
    frame = _frame(a)
    return SymmetryResult(float(s), group, frame[2], frame[0], symmetrize(ops, q, perms), centroid)


def symmetry_measure(fragment_or_positions, group="C3v", species=None):
    """CSM score of a CappedFragment (or raw positions plus species) for ``group``."""
    if hasattr(fragment_or_positions, "positions") and hasattr(fragment_or_positions, "symbols"):
        positions = fragment_or_positions.positions
        species = fragment_or_positions.symbols
    else:
        positions = fragment_or_positions
    return symmetry_detail(positions, species, group).score
