"""Warmup tuning of the energy threshold delta and the macro step size h."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .integrator import DivergentMacroStep, _micro
from .phase import PhasePoint
from .sampler import walnuts_transition

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    """Warmup settings.

    ``energy_budget`` is the orbit-level energy error budget that should hold
    with probability ``p_a``; ``gamma`` is the target probability that a
    macro step needs no halving.
    """

    energy_budget: float = 0.6
    p_a: float = 0.95
    gamma: float = 0.8
    warmup_iters: int = 1000
    initial_window: int = 25
    probe_budget: int = 200
    delta_bounds: tuple = (1e-6, 10.0)
    h_bracket: tuple = (1e-6, 10.0)
    bisection_iters: int = 20
    pool_inflation: bool = True
    pool_probes: bool = True

    def __post_init__(self):
        if not self.energy_budget > 0:
            raise ValueError("energy budget must be positive")
        if not 0 < self.p_a < 1:
            raise ValueError("p_a must lie in (0, 1)")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.warmup_iters < 0 or self.initial_window < 1:
            raise ValueError("bad warmup schedule")
        if self.probe_budget < 1:
            raise ValueError("probe budget must be positive")


def record_inflation(stats, delta, buffer=None):
    """Inflation factor envelope / delta, appended to ``buffer`` if given."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    k = stats.envelope / delta
    if buffer is not None:
        buffer.append(k)
    return k


def adapt_delta(buffer, energy_budget, p_a, delta_bounds=(1e-6, 10.0)):
    """delta = budget / (empirical p_a quantile of the inflation factors).

    The quantile is the order statistic at rank ceil(p_a * n).
    """
    values = np.sort(np.asarray(buffer, dtype=float))
    if values.size == 0:
        raise ValueError("empty inflation buffer")
    rank = max(1, math.ceil(p_a * values.size))
    q = values[rank - 1]
    lo, hi = delta_bounds
    if not q > 0:
        return hi
    return float(min(max(energy_budget / q, lo), hi))


@dataclass
class StepSearch:
    h: float
    no_halving: float
    bracketed: bool


def make_probes(model, M, thetas, budget, rng):
    """Pair probe positions with fresh momenta and cache their gradients."""
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[None, :]
    picks = np.resize(np.arange(len(thetas)), budget) if len(thetas) < budget else rng.choice(len(thetas), budget, replace=False)
    probes = []
    with np.errstate(all="ignore"):
        for k in picks:
            theta = thetas[k]
            logp, grad = model.evaluate(theta)
            probes.append(PhasePoint(theta, M.sample(rng), logp, grad))
    return probes


def no_halving_fraction(model, M, probes, h, delta, mode="envelope", min_halvings=0):
    """Fraction of probes for which micro() needs no extra halving."""
    hits = 0
    with np.errstate(all="ignore"):
        for z in probes:
            try:
                _micro(model, M, z, h, delta, mode, min_halvings, min_halvings)
                hits += 1
            except DivergentMacroStep:
                pass
    return hits / len(probes)


def adapt_macro_step(model, M, delta, gamma, probes, bracket=(1e-6, 10.0), iters=20, mode="envelope", min_halvings=0):
    """Bisect on log h so the no-halving fraction over ``probes`` hits gamma.

    Returns a StepSearch; ``bracketed`` is False when the target lies
    outside the bracket, in which case the nearer endpoint is returned.
    """
    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    frac = lambda log_h: no_halving_fraction(model, M, probes, math.exp(log_h), delta, mode, min_halvings)
    p_lo = frac(lo)
    if p_lo < gamma:
        log.warning("no-halving target %.3f unreachable even at h=%g", gamma, bracket[0])
        return StepSearch(bracket[0], p_lo, False)
    p_hi = frac(hi)
    if p_hi >= gamma:
        log.warning("no-halving target %.3f exceeded even at h=%g", gamma, bracket[1])
        return StepSearch(bracket[1], p_hi, False)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if frac(mid) >= gamma:
            lo = mid
        else:
            hi = mid
    return StepSearch(math.exp(lo), frac(lo), True)


def window_schedule(total, first=25):
    """Doubling windows 25, 50, 100, ... The remainder (or the last doubling
    window if there is none) is the final window, run with frozen
    parameters."""
    windows = []
    size = first
    used = 0
    while used + size <= total:
        windows.append(size)
        used += size
        size *= 2
    if used < total:
        windows.append(total - used)
    return windows


@dataclass
class WarmupTrace:
    deltas: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    no_halving: list = field(default_factory=list)
    bracketed: list = field(default_factory=list)
    window_sizes: list = field(default_factory=list)
    transitions: int = 0


def warmup(model, M, cfg, adapt_cfg, theta0, streams):
    """Alternate sampling windows with delta and h updates.

    After each window except the last, delta is reset from the inflation
    factors and then h is re-solved for the new delta on probe states. With
    ``pool_inflation``/``pool_probes`` (the default) both draw on every
    window so far rather than only the latest one, which keeps a chain that
    lingers in one region from whipsawing the parameters. The last window
    runs with the final parameters.

    Args:
        streams: ChainStreams; warmup consumes iterations
            0 .. warmup_iters - 1.

    Returns:
        (tuned WalnutsConfig, last position, WarmupTrace)
    """
    theta = np.asarray(theta0, dtype=float)
    trace = WarmupTrace()
    if adapt_cfg.warmup_iters == 0:
        return cfg, theta, trace
    windows = window_schedule(adapt_cfg.warmup_iters, adapt_cfg.initial_window)
    it = 0
    inflation = []
    visited = []
    for w, size in enumerate(windows):
        if not adapt_cfg.pool_inflation:
            inflation = []
        if not adapt_cfg.pool_probes:
            visited = []
        for _ in range(size):
            theta, st = walnuts_transition(model, M, cfg, theta, streams.transition(it))
            it += 1
            record_inflation(st, cfg.delta, inflation)
            visited.append(theta)
        trace.window_sizes.append(size)
        if w == len(windows) - 1:
            break
        delta = adapt_delta(inflation, adapt_cfg.energy_budget, adapt_cfg.p_a, adapt_cfg.delta_bounds)
        rng = streams.adapt(w)
        probes = make_probes(model, M, visited, adapt_cfg.probe_budget, rng)
        search = adapt_macro_step(
            model, M, delta, adapt_cfg.gamma, probes, adapt_cfg.h_bracket, adapt_cfg.bisection_iters,
            cfg.energy_error_mode, cfg.min_halvings,
        )
        cfg = cfg.replace(delta=delta, h=search.h)
        trace.deltas.append(delta)
        trace.steps.append(search.h)
        trace.no_halving.append(search.no_halving)
        trace.bracketed.append(search.bracketed)
        log.info("window %d (%d its): delta=%.4g h=%.4g no-halving=%.3f", w, size, delta, search.h, search.no_halving)
    trace.transitions = it
    return cfg, theta, trace
