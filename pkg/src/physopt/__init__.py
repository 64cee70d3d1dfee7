"""Learned physics-informed iterative solvers for parametric PDEs.

Kept import-free so the CLI can configure BLAS threading before numpy loads.
"""

__version__ = "0.1.0"
