"""Equilibrium investment under stochastically evolving CRRA risk aversion.

Solves for the time-consistent equilibrium fraction of wealth held in the
risky asset when relative risk aversion is the exponential of an arithmetic
Brownian motion, by coupling a family of terminal-state-conditioned
continuation-factor PDEs with a density-weighted policy map, and verifies
the result against independent Monte Carlo oracles.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateTimeError,
    DomainError,
    OutOfGridError,
    PositivityError,
    SingularGammaError,
)
from .model import (
    EPS_GAMMA,
    ModelParams,
    RiskAversion,
    crra_utility,
    expected_terminal_gamma,
    inverse_crra,
    phi,
    phi_prime,
)
from .conditional import (
    ConditionalLaw,
    bridge_drift_y,
    conditional_density,
    conditioned_wealth_drift,
    score,
)
from .pide import (
    GridSpec,
    HSurface,
    ResidualNorms,
    coefficients,
    default_grid,
    residual,
    solve_h,
)
from .equilibrium import (
    FixedPointConfig,
    IterationMeta,
    PolicySurface,
    closed_form_policy_rho0,
    ehjb_supremand,
    fixed_point_solve,
    hedging_integral,
    policy_from_h,
    reward_quadrature,
)
from .mc import (
    GRepReport,
    PathBatch,
    RewardEstimate,
    SimConfig,
    SpikePolicy,
    SpikeReport,
    conditioned_time_grid,
    equilibrium_spike_test,
    gh_terminal_quadrature,
    reward_mc,
    simulate_conditioned,
    simulate_unconditional,
    verify_g_representation,
)
from .persist import (
    load_h_surface,
    load_policy_surface,
    save_h_surface,
    save_policy_surface,
)

__all__ = [
    "EPS_GAMMA",
    "ModelParams",
    "RiskAversion",
    "crra_utility",
    "inverse_crra",
    "phi",
    "phi_prime",
    "expected_terminal_gamma",
    "ConditionalLaw",
    "conditional_density",
    "score",
    "bridge_drift_y",
    "conditioned_wealth_drift",
    "GridSpec",
    "HSurface",
    "ResidualNorms",
    "default_grid",
    "coefficients",
    "solve_h",
    "residual",
    "FixedPointConfig",
    "IterationMeta",
    "PolicySurface",
    "closed_form_policy_rho0",
    "policy_from_h",
    "hedging_integral",
    "fixed_point_solve",
    "ehjb_supremand",
    "reward_quadrature",
    "SimConfig",
    "PathBatch",
    "SpikePolicy",
    "SpikeReport",
    "GRepReport",
    "RewardEstimate",
    "conditioned_time_grid",
    "simulate_unconditional",
    "simulate_conditioned",
    "reward_mc",
    "verify_g_representation",
    "equilibrium_spike_test",
    "gh_terminal_quadrature",
    "save_h_surface",
    "load_h_surface",
    "save_policy_surface",
    "load_policy_surface",
    "ConfigError",
    "ConvergenceError",
    "DegenerateTimeError",
    "DomainError",
    "OutOfGridError",
    "PositivityError",
    "SingularGammaError",
]

__version__ = "0.1.0"
