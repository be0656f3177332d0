"""Capped density functional embedding workbench.

Modules: lattice (structures, supercells, bonds), partition (carving and
capping), symmetry (continuous symmetry measure), field (density spaces and
files), meanfield (tight-binding solver), oep (embedding potential
optimization), manybody (active-space FCI), nvmodel (minimal NV center model)
and cli.
"""

__version__ = "0.1.0"
