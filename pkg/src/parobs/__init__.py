"""Solvers for one-dimensional parabolic obstacle problems.

The package simulates degenerate diffusion problems of the form

    du/dt - (a(x) u')' = -F(x, t) * H(u),    u >= 0,

where H is the Heaviside function and the sink F is either prescribed or
coupled to the solution through a nonlocal multiplier that conserves total
mass.  Submodules:

grid        uniform grids, nonnegative nodal fields, support detection
stepping    implicit complementarity time stepping (the production scheme)
reference   independent explicit reference solver and inequality certification
sphere      mass-conserving model on (-1, 1) with the degenerate coefficient 1 - x^2
line        point-mass release on the line, support envelopes, composite model
oscillation multiscale atom hierarchies with oscillating support size
cli         command line entry points
"""

from parobs.grid import Field1D, Grid, SupportSet, detect_support, infimum_of_support, integrate

__all__ = [
    "Field1D",
    "Grid",
    "SupportSet",
    "detect_support",
    "infimum_of_support",
    "integrate",
]

__version__ = "0.1.0"
