"""Statistical finite elements with interacting particle Langevin samplers.

Subpackage map:

- mesh_fem: meshes, P1 assembly, Dirichlet treatment, observation operators
- gp_field: squared-exponential fields through a Laplacian eigenbasis
- model_linear: potentials, gradients, preconditioners, closed-form targets
- samplers: ULA and the interacting particle runners
- model_nonlinear: state-dependent diffusivity, Newton, Gaussian approximations
- experiments / cli: reproducible studies behind the statfem-ipla command
"""

__version__ = "0.1.0"

from .experiments import (
    ConfigError,
    ExperimentConfig,
    FitResult,
    NumericalFailure,
    build_problem,
    default_config,
    fit_order,
    load_config,
    spiral_points,
)
from .gp_field import (
    GaussianDist,
    LaplacianEigs,
    SeKernel,
    assemble_error_covariance,
    assemble_forcing_prior,
    solve_laplacian_eigs,
    spectral_density_se,
)
from .mesh_fem import (
    DirichletSpec,
    FemSystem,
    Mesh,
    apply_dirichlet,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_disc_mesh,
    build_interval_mesh,
    build_observation_operator,
    load_mesh,
    save_mesh,
)
from .model_linear import (
    DofMap,
    LinearModel,
    Preconditioner,
    analytic_mmap,
    analytic_posterior,
    build_model,
    build_preconditioners,
    convexity_constants,
    generate_data,
    grad_b_potential,
    grad_theta_potential,
    grad_u_potential,
    hessian,
    potential,
    restrict_to_free,
    statfem_prior,
)
from .model_nonlinear import (
    GaussApprox,
    NewtonError,
    NonlinearSystem,
    approx_fot,
    approx_mc,
    approx_ut,
    assemble_jacobian,
    assemble_residual,
    build_nonlinear_system,
    newton_solve,
    nonlinear_ipla_run,
    ut_weights,
)
from .samplers import (
    IplaConfig,
    ParticleSystem,
    StepSizeWarning,
    Trace,
    detect_divergence,
    ipla_diffusivity_run,
    ipla_forcing_run,
    max_stable_stepsize,
    ula_run,
)
