"""Symmetry- and conservation-constrained neural surrogates for
staggered-grid fluid PDEs, with the reference solvers and a verification
harness."""

__version__ = "0.1.0"
