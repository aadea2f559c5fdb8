"""WALNUTS: a No-U-Turn sampler with energy-error-controlled micro steps,
plus NUTS and biased-progressive HMC baselines."""

from .adapt import AdaptConfig, adapt_delta, adapt_macro_step, record_inflation, warmup
from .diagnostics import binned_trend, ess, index_displacement_hist, summarize
from .integrator import (
    DivergenceError,
    DivergentMacroStep,
    MicroDistribution,
    MicroResult,
    leapfrog_n,
    leapfrog_step,
    micro,
    pmf_micro,
    sample_micro_factor,
)
from .orbit import CheckpointStack, Orbit, concat, sub_u_turn, u_turn
from .phase import MassMatrix, PhasePoint, hamiltonian, momentum_flip, sample_momentum
from .sampler import (
    ChainStreams,
    ExtendedState,
    TransitionStats,
    WalnutsConfig,
    bphmc_transition,
    exact_bp_index,
    nuts_transition,
    psi_involution,
    run_chain,
    triangular_pmf,
    walnuts_transition,
)
from .targets import FunnelTarget, GaussianTarget, StockWatsonTarget, TargetModel, funnel_curvature

__version__ = "0.1.0"
