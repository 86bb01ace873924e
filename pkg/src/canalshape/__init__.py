"""Reconstruction of an ear-canal wall from acoustic Cauchy data on the membrane.

Modules
-------
geometry
    Parametric patches, closed canal surfaces, meshes, width and admissibility.
kernels
    Helmholtz Green's function, its derivatives and singular quadrature rules.
operators
    Dense layer-potential operators with near-singular quadrature.
potentials
    Cauchy data, single- and double-layer potentials and the jump convention.
forward
    Mixed Dirichlet forward solver and synthetic data generator.
inverse
    Regularized Gauss-Newton reconstruction of the wall.
"""

__version__ = "0.1.0"
