"""Chernoff approximations of evolution semigroups on periodic grids."""

from .combinators import (
    DomainMask,
    SubordinatorSpec,
    compose,
    convex_splitting,
    dirichlet_restrict,
    multiplicative_perturbation,
    rotate,
    subordinate_bounded_measure,
    subordinate_known_density,
    theta_splitting,
)
from .families import (
    ChernoffFamily,
    GeneratorSpec,
    SymbolSpec,
    averaging_family,
    composite_convolution_family,
    gaussian_family,
    matrix_euler_family,
    matrix_resolvent_family,
    periodic_laplacian_matrix,
    poisson_family,
    potential_family,
    shift_family,
    symbol_family,
)
from .grid import (
    Grid,
    GridFunction,
    fourier_forward,
    fourier_inverse,
    interpolate,
    l2_norm,
    sample,
    sup_norm,
)
from .iterate import ConvergenceReport, chernoff_iterate, convergence_study, derivative_check
from .stochastic import (
    FractionalMeasure,
    PathEnsemble,
    euler_maruyama,
    fractional_solve,
    half_stable_subordinator_density,
    inverse_half_stable_density,
    mc_functional,
)

__version__ = "0.1.0"
