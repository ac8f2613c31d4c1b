"""Spectral toolkit for semilinear SPDEs driven by the biharmonic operator.

Simulation and verification code for equations of the form

    du/dt + Laplace^2 u = Laplace R(u) + g + sum_i D^{k_i} b_i + sigma dF/dt

on [0, pi]^d with Neumann or Dirichlet boundary conditions, where F is a
Gaussian noise white in time and spatially correlated by a kernel f.  The
flagship instance is the stochastic Cahn-Hilliard equation.
"""

from .basis import NEUMANN, DIRICHLET, Basis, SpectralField, GridField, apply_operator
from .covariance import (
    CovarianceSpec,
    cahn_hilliard_integrability,
    gram_operator,
    holder_integrability,
    moment_integrability,
    small_ball_integral,
    stochastic_integrability,
)
from .greens import (
    KernelExponents,
    apply_semigroup,
    chapman_kolmogorov_check,
    diagonal_scaling_check,
    fit_kernel_bound,
    green_function,
)
from .malliavin import (
    decomposition_terms,
    density_criterion,
    malliavin_matrix,
    tangent_propagate,
    thinning_check,
)
from .noise import empirical_covariance_test, make_backend
from .regularity import (
    TIME,
    Ensemble,
    LinearOracle,
    holder_exponent,
    moment_track,
    structure_function,
    u0_regularity_check,
)
from .solver import (
    ModelSpec,
    SolverConfig,
    Trajectory,
    convolution_bound_check,
    deterministic_convolution,
    energy_diagnostics,
    picard_solve,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "NEUMANN",
    "DIRICHLET",
    "Basis",
    "SpectralField",
    "GridField",
    "apply_operator",
    "CovarianceSpec",
    "cahn_hilliard_integrability",
    "gram_operator",
    "holder_integrability",
    "moment_integrability",
    "small_ball_integral",
    "stochastic_integrability",
    "KernelExponents",
    "apply_semigroup",
    "chapman_kolmogorov_check",
    "diagonal_scaling_check",
    "fit_kernel_bound",
    "green_function",
    "decomposition_terms",
    "density_criterion",
    "malliavin_matrix",
    "tangent_propagate",
    "thinning_check",
    "empirical_covariance_test",
    "make_backend",
    "TIME",
    "Ensemble",
    "LinearOracle",
    "holder_exponent",
    "moment_track",
    "structure_function",
    "u0_regularity_check",
    "ModelSpec",
    "SolverConfig",
    "Trajectory",
    "convolution_bound_check",
    "deterministic_convolution",
    "energy_diagnostics",
    "picard_solve",
    "simulate",
    "__version__",
]
