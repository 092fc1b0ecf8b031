"""
hpscatter: plane-wave scattering by perfect conductors with an H-matrix
compressed method-of-moments operator, Schur-complement near-field scaling
and a short power-series solve.
"""

__version__ = "0.1.0"
