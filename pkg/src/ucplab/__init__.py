"""Numerical experiments on quantitative unique continuation for Schrodinger operators.

Submodules
----------
discretization
    Boxes, grids and finite-difference Hamiltonians.
potentials
    Potential catalog and relative-bound constants.
ucp
    Equidistributed sets and the spectral-subspace observability bound.
ghost
    The ghost-dimension extension and its norm identities.
carleman
    Radial and half-space Carleman weights with empirical constants.
control
    Null control of the heat equation from an equidistributed set.
randomops
    Random Schrodinger ensembles: Wegner counts, eigenvalue lifting, initial length scale.
expcli
    Config-driven experiment runner and command line.
"""

__version__ = "0.1.0"
