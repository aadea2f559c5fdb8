"""Transition kernels: WALNUTS, NUTS, biased-progressive HMC and the
exact-flow index law.

Randomness
----------
Each transition draws from three independent streams (see
:class:`TransitionStreams`), always in this order:

* ``aux``: macro step jitter (per-transition mode, only if jitter > 0),
  the momentum, then the ``m_max`` direction bits.
* ``micro``: per macro step, in integration order, the jitter factor
  (per-macro-step mode only) then the micro factor draw (random laws only).
* ``select``: per extension, one uniform for each extension state after
  the first (online categorical draw), then the acceptance uniform.

Keeping purposes on separate streams makes the draws of one decision
independent of how much another decision consumed, which is what lets the
streaming and full-storage implementations, and WALNUTS and NUTS in the
reduction case, see identical random numbers.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .integrator import (
    ENDPOINT,
    ENVELOPE,
    DivergentMacroStep,
    MicroDistribution,
    _micro,
    integrate,
)
from .orbit import CheckpointStack, Orbit, concat, is_u_turn, log_sum_exp_pair, sub_u_turn, u_turn
from .phase import PhasePoint

_NEG_INF = -math.inf

TERMINATIONS = ("u_turn", "sub_u_turn", "max_doublings", "zero_weights", "divergent")


# ---------------------------------------------------------------- rng


@dataclass
class TransitionStreams:
    aux: np.random.Generator
    micro: np.random.Generator
    select: np.random.Generator


class ChainStreams:
    """Counter-based random streams for one chain.

    Every (purpose, iteration) pair gets its own Philox stream whose key is
    derived from (seed, chain, purpose) and whose counter starts at the
    iteration number, so any transition can be replayed in isolation.
    """

    AUX, MICRO, SELECT, ADAPT = range(4)

    def __init__(self, seed, chain=0):
        self.seed = int(seed)
        self.chain = int(chain)
        self._keys = [
            np.random.SeedSequence(self.seed, spawn_key=(self.chain, purpose)).generate_state(2, np.uint64)
            for purpose in range(4)
        ]

    def generator(self, purpose, counter):
        bitgen = np.random.Philox(key=self._keys[purpose], counter=[0, int(counter), 0, 0])
        return np.random.Generator(bitgen)

    def transition(self, iteration):
        return TransitionStreams(
            self.generator(self.AUX, iteration),
            self.generator(self.MICRO, iteration),
            self.generator(self.SELECT, iteration),
        )

    def adapt(self, window):
        return self.generator(self.ADAPT, window)

    def initial(self):
        """Stream for drawing the chain's starting point."""
        return self.generator(self.ADAPT, 1 << 40)


def as_streams(rng):
    """Accept TransitionStreams, a numpy Generator or an integer seed."""
    if isinstance(rng, TransitionStreams):
        return rng
    if isinstance(rng, np.random.Generator):
        return TransitionStreams(*rng.spawn(3))
    return ChainStreams(rng).transition(0)


# ---------------------------------------------------------------- configs and records


@dataclass
class WalnutsConfig:
    """Settings for one WALNUTS transition.

    ``h`` is the macro step size, ``delta`` the per-macro-step energy error
    threshold and ``m_max`` the maximum number of doublings.
    """

    h: float
    delta: float = 0.3
    m_max: int = 10
    micro_dist: MicroDistribution = field(default_factory=MicroDistribution.randomized_two_point)
    jitter: float = 0.2
    jitter_mode: str = "per_transition"
    energy_error_mode: str = ENVELOPE
    min_halvings: int = 0
    halvings_cap: int = 20
    reuse_micro: bool = True

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.m_max < 1:
            raise ValueError("m_max must be at least 1")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")
        if self.jitter_mode not in ("per_transition", "per_macro_step"):
            raise ValueError(f"unknown jitter mode {self.jitter_mode!r}")
        if self.energy_error_mode not in (ENVELOPE, ENDPOINT):
            raise ValueError(f"unknown energy error mode {self.energy_error_mode!r}")
        if not 0 <= self.min_halvings <= self.halvings_cap:
            raise ValueError("need 0 <= min_halvings <= halvings_cap")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class ExtendedState:
    """Augmented state (theta, rho, m, b, micro factors, i).

    ``micro_factors[k]`` and ``macro_steps[k]`` describe the interval
    [a + k, a + k + 1] with a = b - 2^m + 1.
    """

    theta: np.ndarray
    rho: np.ndarray
    m: int
    b: int
    micro_factors: np.ndarray
    i: int
    macro_steps: np.ndarray

    @property
    def a(self):
        return self.b - (1 << self.m) + 1

    def validate(self):
        n = (1 << self.m) - 1
        if not self.a <= 0 <= self.b:
            raise ValueError("orbit range must contain 0")
        if not self.a <= self.i <= self.b:
            raise ValueError("selected index outside the orbit")
        if len(self.micro_factors) != n or len(self.macro_steps) != n:
            raise ValueError("need one micro factor and macro step per interval")


@dataclass
class TransitionStats:
    """Per-transition diagnostics.

    ``min_coord``/``max_coord`` track the first coordinate over the orbit
    (omega for the funnel). Micro step fields are NaN for single-state
    orbits.
    """

    m: int
    i: int
    displacement: float
    envelope: float
    min_micro_step: float
    max_micro_step: float
    grads: int
    terminated_by: str
    h: float
    max_halvings: int = 0
    min_coord: float = math.nan
    max_coord: float = math.nan
    extended: Optional[ExtendedState] = None

    @property
    def orbit_length(self):
        return 1 << self.m


def macro_jitter(h, jitter, rng):
    """Return h * Unif(1 - jitter, 1 + jitter); no draw when jitter is 0."""
    if jitter == 0:
        return h
    return h * (1.0 + jitter * (2.0 * rng.random() - 1.0))


# ---------------------------------------------------------------- shared pieces


class _OrbitTally:
    """Running orbit-level diagnostics."""

    __slots__ = ("H_min", "H_max", "min_ell_step", "max_ell_step", "max_ell", "lo", "hi")

    def __init__(self, H, coord):
        self.H_min = self.H_max = H
        self.min_ell_step = math.inf
        self.max_ell_step = -math.inf
        self.max_ell = 0
        self.lo = self.hi = coord

    def add(self, H_min, H_max, step, ell, coord):
        if H_min < self.H_min:
            self.H_min = H_min
        if H_max > self.H_max:
            self.H_max = H_max
        if step < self.min_ell_step:
            self.min_ell_step = step
        if step > self.max_ell_step:
            self.max_ell_step = step
        if ell > self.max_ell:
            self.max_ell = ell
        if coord < self.lo:
            self.lo = coord
        elif coord > self.hi:
            self.hi = coord

    def merge(self, other):
        self.H_min = min(self.H_min, other.H_min)
        self.H_max = max(self.H_max, other.H_max)
        self.min_ell_step = min(self.min_ell_step, other.min_ell_step)
        self.max_ell_step = max(self.max_ell_step, other.max_ell_step)
        self.max_ell = max(self.max_ell, other.max_ell)
        self.lo = min(self.lo, other.lo)
        self.hi = max(self.hi, other.hi)


def _finish_stats(tally, m, index, displacement, grads, terminated, h, extended=None):
    empty = tally.max_ell == 0
    return TransitionStats(
        m=m,
        i=index,
        displacement=displacement,
        envelope=tally.H_max - tally.H_min,
        min_micro_step=math.nan if empty else tally.min_ell_step,
        max_micro_step=math.nan if empty else tally.max_ell_step,
        grads=grads,
        terminated_by=terminated,
        h=h,
        max_halvings=0 if empty else tally.max_ell.bit_length() - 1,
        min_coord=tally.lo,
        max_coord=tally.hi,
        extended=extended,
    )


def biased_progressive_select(log_sum_old, log_sum_ext, u):
    """Whether the extension replaces the current selection.

    Accepts with probability min(1, sum W_ext / sum W_old) given a uniform
    ``u`` on (0, 1].
    """
    if log_sum_old == _NEG_INF:
        raise ValueError("the existing orbit must carry positive weight")
    if log_sum_ext == _NEG_INF:
        return False
    return math.log(u) <= log_sum_ext - log_sum_old


def online_categorical(log_weights, rng):
    """Draw an index proportional to exp(log_weights), one state at a time.

    Returns (index, log of the weight sum). Consumes one uniform per entry
    after the first, whatever the weights.
    """
    index = 0
    total = log_weights[0]
    for k in range(1, len(log_weights)):
        lw = log_weights[k]
        total = log_sum_exp_pair(total, lw)
        u = 1.0 - rng.random()
        if lw != _NEG_INF and math.log(u) <= lw - total:
            index = k
    return index, total


@dataclass
class _Step:
    state: PhasePoint
    H: float
    ell: int
    log_ratio: float
    H_min: float
    H_max: float
    grads: int


def _macro_step(model, M, cfg, start, h, rng):
    """One macro step of size h from ``start`` in the outward frame.

    Returns the new state together with log p(ell | backward baseline) -
    log p(ell | forward baseline), the factor that enters the weight.
    Raises DivergentMacroStep if the forward micro search fails.
    """
    delta = cfg.delta
    mode = cfg.energy_error_mode
    dist = cfg.micro_dist
    fwd = _micro(model, M, start, h, delta, mode, cfg.min_halvings, cfg.halvings_cap)
    grads = fwd.grads_used
    ell = dist.sample(fwd.ell, rng)
    reuse = cfg.reuse_micro and ell == fwd.ell
    if reuse:
        end, H_end, H_min, H_max = fwd.endpoint, fwd.H_end, fwd.H_min, fwd.H_max
    else:
        traj = integrate(model, M, start, h / ell, ell)
        grads += traj.grads
        if not traj.finite:
            raise DivergentMacroStep("macro step trajectory diverged", math.inf, grads)
        end, H_end, H_min, H_max = traj.end, traj.H_end, traj.H_min, traj.H_max

    back = end.flip()
    ell_back = None
    if cfg.reuse_micro:
        # The law only charges factors >= the baseline, so candidates above
        # ell cannot matter; when ell came from micro() itself, reversibility
        # makes ell an admissible backward factor.
        top = ell.bit_length() - 1
        if reuse:
            top -= 1
        for k in range(cfg.min_halvings, top + 1):
            traj = integrate(model, M, back, h / (1 << k), 1 << k)
            grads += traj.grads
            if traj.error(mode) <= delta:
                ell_back = 1 << k
                break
        if ell_back is None and reuse:
            ell_back = ell
    else:
        try:
            res = _micro(model, M, back, h, delta, mode, cfg.min_halvings, cfg.halvings_cap)
            grads += res.grads_used
            ell_back = res.ell
        except DivergentMacroStep as err:
            grads += err.grads_used

    log_ratio = dist.log_pmf(ell, ell_back) - dist.log_pmf(ell, fwd.ell)
    return _Step(end, H_end, ell, log_ratio, H_min, H_max, grads)


def orbit_weights_extend(model, M, cfg, prev_state, prev_log_weight, direction, rng, h=None):
    """Take one macro step from ``prev_state`` and return the new state (in
    orbit order) and its log weight.

    ``direction`` is +1 (forward) or -1 (backward). Log weights carry
    log(mu e^{-K}) plus the accumulated log ratios of micro factor
    probabilities.
    """
    h = cfg.h if h is None else h
    with np.errstate(all="ignore"):
        start = prev_state if direction > 0 else prev_state.flip()
        H_prev = -start.logp + M.kinetic(start.rho) if start.logp is not None else None
        if start.grad is None:
            logp, grad = model.evaluate(start.theta)
            start = PhasePoint(start.theta, start.rho, logp, grad)
            H_prev = -logp + M.kinetic(start.rho)
        step = _macro_step(model, M, cfg, start, h, rng)
    log_weight = prev_log_weight + (H_prev - step.H) + step.log_ratio
    state = step.state if direction > 0 else step.state.flip()
    return state, log_weight


# ---------------------------------------------------------------- WALNUTS, streaming


@dataclass
class _Extension:
    status: str
    grads: int
    end: Optional[PhasePoint] = None
    correction: float = 0.0
    log_weight_end: float = _NEG_INF
    log_sum: float = _NEG_INF
    candidate: Optional[PhasePoint] = None
    candidate_pos: int = 0
    tally: Optional[_OrbitTally] = None
    micro_factors: Optional[list] = None
    macro_steps: Optional[list] = None


def _extend(model, M, cfg, start, correction, length, h, streams, record):
    """Stream ``length`` macro steps outward from ``start``.

    Runs the sub-U-turn checks and the online categorical draw as the
    states arrive, so only O(log length) states are held.
    """
    stack = CheckpointStack(M, length)
    per_step = cfg.jitter_mode == "per_macro_step" and cfg.jitter > 0
    micro_rng = streams.micro
    select_rng = streams.select
    state = start
    grads = 0
    log_sum = _NEG_INF
    candidate = None
    candidate_pos = 0
    tally = None
    factors = [] if record else None
    steps = [] if record else None
    lw = _NEG_INF
    for p in range(length):
        hp = macro_jitter(cfg.h, cfg.jitter, micro_rng) if per_step else h
        try:
            step = _macro_step(model, M, cfg, state, hp, micro_rng)
        except DivergentMacroStep as err:
            return _Extension("divergent", grads + err.grads_used)
        grads += step.grads
        state = step.state
        correction += step.log_ratio
        lw = -step.H + correction
        if p == 0:
            log_sum = lw
            candidate = state
            tally = _OrbitTally(step.H, state.theta[0])
        else:
            log_sum = log_sum_exp_pair(log_sum, lw)
            u = 1.0 - select_rng.random()
            if lw != _NEG_INF and math.log(u) <= lw - log_sum:
                candidate = state
                candidate_pos = p
        tally.add(step.H_min, step.H_max, hp / step.ell, step.ell, state.theta[0])
        if record:
            factors.append(step.ell)
            steps.append(hp)
        if stack.push(state):
            return _Extension("sub_u_turn", grads)
    return _Extension("ok", grads, state, correction, lw, log_sum, candidate, candidate_pos, tally, factors, steps)


def walnuts_transition(model, M, cfg, theta, rng, record=False):
    """One WALNUTS transition from ``theta``.

    Args:
        model: Target model.
        M: Mass matrix.
        cfg: WalnutsConfig.
        theta: Current position.
        rng: TransitionStreams, Generator or integer seed.
        record: Attach the ExtendedState to the stats.

    Returns:
        (new theta, TransitionStats)
    """
    streams = as_streams(rng)
    theta = np.asarray(theta, dtype=float)
    with np.errstate(all="ignore"):
        return _walnuts(model, M, cfg, theta, streams, record)


def _walnuts(model, M, cfg, theta, streams, record):
    aux = streams.aux
    h = macro_jitter(cfg.h, cfg.jitter, aux) if cfg.jitter_mode == "per_transition" else cfg.h
    rho = M.sample(aux)
    bits = aux.integers(0, 2, size=cfg.m_max)

    logp, grad = model.evaluate(theta)
    grads = 1
    z0 = PhasePoint(theta, rho, logp, grad)
    H0 = -logp + M.kinetic(rho)
    left = right = z0
    c_left = c_right = 0.0
    lw_left = lw_right = -H0
    log_total = -H0
    selected = z0
    sel_index = 0
    a = b = 0
    tally = _OrbitTally(H0, theta[0])
    factors, steps = ([], []) if record else (None, None)
    m = 0
    terminated = "max_doublings"

    for k in range(cfg.m_max):
        length = 1 << k
        forward = bits[k] == 1
        if forward:
            ext = _extend(model, M, cfg, right, c_right, length, h, streams, record)
        else:
            ext = _extend(model, M, cfg, left.flip(), c_left, length, h, streams, record)
        grads += ext.grads
        if ext.status != "ok":
            terminated = ext.status
            break

        u = 1.0 - streams.select.random()
        if biased_progressive_select(log_total, ext.log_sum, u):
            selected = ext.candidate
            sel_index = b + 1 + ext.candidate_pos if forward else a - 1 - ext.candidate_pos
        log_total = log_sum_exp_pair(log_total, ext.log_sum)
        tally.merge(ext.tally)
        if forward:
            right, c_right, lw_right = ext.end, ext.correction, ext.log_weight_end
            b += length
            if record:
                factors.extend(ext.micro_factors)
                steps.extend(ext.macro_steps)
        else:
            left, c_left, lw_left = ext.end.flip(), ext.correction, ext.log_weight_end
            a -= length
            if record:
                factors[:0] = ext.micro_factors[::-1]
                steps[:0] = ext.macro_steps[::-1]
        m = k + 1

        if is_u_turn(left, right, M):
            terminated = "u_turn"
            break
        if lw_left == _NEG_INF and lw_right == _NEG_INF:
            terminated = "zero_weights"
            break

    extended = None
    if record:
        extended = ExtendedState(theta.copy(), rho.copy(), m, b, np.array(factors, dtype=np.int64), sel_index, np.array(steps, dtype=float))
    if cfg.jitter_mode == "per_macro_step" and record:
        lo, hi = sorted((0, sel_index))
        displacement = math.copysign(float(np.sum(extended.macro_steps[lo - a : hi - a])), sel_index)
    else:
        displacement = sel_index * h
    stats = _finish_stats(tally, m, sel_index, displacement, grads, terminated, h, extended)
    return selected.theta, stats


# ---------------------------------------------------------------- WALNUTS, full storage reference


@dataclass
class ReferenceResult:
    theta: np.ndarray
    index: int
    m: int
    terminated_by: str
    orbit: Orbit


def walnuts_transition_reference(model, M, cfg, theta, rng):
    """Full-storage WALNUTS used to cross-check the streaming kernel.

    Builds every extension in memory, runs the recursive sub-U-turn check
    on it and then draws from it, exactly in the order of the algorithm's
    listing. Consumes the random streams identically to
    :func:`walnuts_transition`.
    """
    streams = as_streams(rng)
    theta = np.asarray(theta, dtype=float)
    with np.errstate(all="ignore"):
        return _walnuts_reference(model, M, cfg, theta, streams)


def _walnuts_reference(model, M, cfg, theta, streams):
    aux = streams.aux
    h = macro_jitter(cfg.h, cfg.jitter, aux) if cfg.jitter_mode == "per_transition" else cfg.h
    rho = M.sample(aux)
    bits = aux.integers(0, 2, size=cfg.m_max)
    logp, grad = model.evaluate(theta)
    z0 = PhasePoint(theta, rho, logp, grad)
    H0 = -logp + M.kinetic(rho)
    orbit = Orbit(0, [z0], [-H0], [])
    corrections = [0.0]
    log_total = -H0
    selected, sel_index = z0, 0
    m = 0
    terminated = "max_doublings"
    per_step = cfg.jitter_mode == "per_macro_step" and cfg.jitter > 0

    for k in range(cfg.m_max):
        length = 1 << k
        forward = bits[k] == 1
        state = orbit.right if forward else orbit.left.flip()
        c = corrections[-1] if forward else corrections[0]
        arrived, log_weights, cs, factors = [], [], [], []
        diverged = False
        for _ in range(length):
            hp = macro_jitter(cfg.h, cfg.jitter, streams.micro) if per_step else h
            try:
                step = _macro_step(model, M, cfg, state, hp, streams.micro)
            except DivergentMacroStep:
                diverged = True
                break
            state = step.state
            c += step.log_ratio
            arrived.append(state)
            log_weights.append(-step.H + c)
            cs.append(c)
            factors.append(step.ell)
        if diverged:
            terminated = "divergent"
            break

        if forward:
            ext = Orbit(orbit.b + 1, arrived, log_weights, factors[1:])
        else:
            ext = Orbit(orbit.a - length, [s.flip() for s in arrived[::-1]], log_weights[::-1], factors[:0:-1])
        if sub_u_turn(ext, M):
            terminated = "sub_u_turn"
            break

        pos, log_sum = online_categorical(log_weights, streams.select)
        u = 1.0 - streams.select.random()
        if biased_progressive_select(log_total, log_sum, u):
            selected = arrived[pos]
            sel_index = orbit.b + 1 + pos if forward else orbit.a - 1 - pos
        log_total = log_sum_exp_pair(log_total, log_sum)
        if forward:
            orbit = concat(orbit, ext, factors[0])
            corrections = corrections + cs
        else:
            orbit = concat(ext, orbit, factors[0])
            corrections = cs[::-1] + corrections
        m = k + 1
        if u_turn(orbit, M):
            terminated = "u_turn"
            break
        if orbit.log_weights[0] == _NEG_INF and orbit.log_weights[-1] == _NEG_INF:
            terminated = "zero_weights"
            break

    return ReferenceResult(selected.theta, sel_index, m, terminated, orbit)


# ---------------------------------------------------------------- involution


def _macro_flow(model, M, z, h, ell):
    return integrate(model, M, z, h / ell, ell).end


def flow_to_index(model, M, z, index):
    """Map the initial point of ``z`` to the orbit state at ``index``."""
    state = PhasePoint(np.asarray(z.theta, dtype=float), np.asarray(z.rho, dtype=float))
    a = z.a
    with np.errstate(all="ignore"):
        if index > 0:
            for j in range(0, index):
                state = _macro_flow(model, M, state, z.macro_steps[j - a], int(z.micro_factors[j - a]))
        elif index < 0:
            state = state.flip()
            for j in range(-1, index - 1, -1):
                state = _macro_flow(model, M, state, z.macro_steps[j - a], int(z.micro_factors[j - a]))
            state = state.flip()
    return state


def psi_involution(model, M, z):
    """Swap the roles of the initial and the selected state.

    Returns (Phi_{i,0}(theta, rho), m, b - i, shifted factors, -i). The
    factor arrays are stored relative to the orbit's left end, so the
    shift leaves them unchanged.
    """
    z.validate()
    if z.i == 0:
        return replace(z, theta=z.theta.copy(), rho=z.rho.copy())
    state = flow_to_index(model, M, z, z.i)
    return ExtendedState(state.theta, state.rho, z.m, z.b - z.i, z.micro_factors.copy(), -z.i, z.macro_steps.copy())


def orbit_endpoints(model, M, z):
    """Rebuild the orbit of ``z`` doubling by doubling, with the direction
    bits encoded by b, and return its (left, right) end states."""
    z.validate()
    left = right = PhasePoint(np.asarray(z.theta, dtype=float), np.asarray(z.rho, dtype=float))
    lo = hi = 0
    a = z.a
    with np.errstate(all="ignore"):
        for k in range(z.m):
            length = 1 << k
            if (z.b >> k) & 1:
                for j in range(hi, hi + length):
                    right = _macro_flow(model, M, right, z.macro_steps[j - a], int(z.micro_factors[j - a]))
                hi += length
            else:
                state = left.flip()
                for j in range(lo - 1, lo - length - 1, -1):
                    state = _macro_flow(model, M, state, z.macro_steps[j - a], int(z.micro_factors[j - a]))
                left = state.flip()
                lo -= length
    return left, right


# ---------------------------------------------------------------- fixed-step samplers


def _leapfrog_stepper(model, M):
    def step(state, h):
        traj = integrate(model, M, state, h, 1)
        return traj.end, traj.H_end, traj.grads, traj.finite

    return step


def _fixed_step_transition(model, M, h, m_max, theta, streams, jitter, check_u_turns, stepper):
    aux = streams.aux
    h = macro_jitter(h, jitter, aux)
    rho = M.sample(aux)
    bits = aux.integers(0, 2, size=m_max)
    logp, grad = model.evaluate(theta)
    grads = 1
    z0 = PhasePoint(theta, rho, logp, grad)
    H0 = -logp + M.kinetic(rho)
    left = right = z0
    lw_left = lw_right = -H0
    log_total = -H0
    selected, sel_index = z0, 0
    a = b = 0
    tally = _OrbitTally(H0, theta[0])
    m = 0
    terminated = "max_doublings"

    for k in range(m_max):
        length = 1 << k
        forward = bits[k] == 1
        state = right if forward else left.flip()
        stack = CheckpointStack(M, length) if check_u_turns else None
        log_sum = _NEG_INF
        candidate, cand_pos = None, 0
        status = "ok"
        ext_tally = None
        lw = _NEG_INF
        for p in range(length):
            state, H, used, finite = stepper(state, h)
            grads += used
            if not finite:
                status = "divergent"
                break
            lw = -H
            if p == 0:
                log_sum = lw
                candidate = state
                ext_tally = _OrbitTally(H, state.theta[0])
            else:
                log_sum = log_sum_exp_pair(log_sum, lw)
                u = 1.0 - streams.select.random()
                if lw != _NEG_INF and math.log(u) <= lw - log_sum:
                    candidate, cand_pos = state, p
            ext_tally.add(H, H, h, 1, state.theta[0])
            if stack is not None and stack.push(state):
                status = "sub_u_turn"
                break
        if status != "ok":
            terminated = status
            break

        u = 1.0 - streams.select.random()
        if biased_progressive_select(log_total, log_sum, u):
            selected = candidate
            sel_index = b + 1 + cand_pos if forward else a - 1 - cand_pos
        log_total = log_sum_exp_pair(log_total, log_sum)
        tally.merge(ext_tally)
        if forward:
            right, lw_right = state, lw
            b += length
        else:
            left, lw_left = state.flip(), lw
            a -= length
        m = k + 1
        if check_u_turns and is_u_turn(left, right, M):
            terminated = "u_turn"
            break
        if lw_left == _NEG_INF and lw_right == _NEG_INF:
            terminated = "zero_weights"
            break

    stats = _finish_stats(tally, m, sel_index, sel_index * h, grads, terminated, h)
    return selected.theta, stats


def nuts_transition(model, M, h, m_max, theta, rng, jitter=0.0):
    """Fixed-step NUTS with biased-progressive selection across doublings
    and multinomial selection within them; weights are e^{-H}.

    Non-finite states abandon the current extension (zero weight) and end
    the transition with the current selection.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    streams = as_streams(rng)
    theta = np.asarray(theta, dtype=float)
    with np.errstate(all="ignore"):
        return _fixed_step_transition(model, M, h, m_max, theta, streams, jitter, True, _leapfrog_stepper(model, M))


def bphmc_transition(model, M, h, m, theta, rng, jitter=0.0):
    """Biased-progressive HMC with a fixed orbit of 2^m states and no U-turn
    checks. Returns (new theta, stats)."""
    if not h > 0:
        raise ValueError("h must be positive")
    if m < 0:
        raise ValueError("m must be nonnegative")
    streams = as_streams(rng)
    theta = np.asarray(theta, dtype=float)
    with np.errstate(all="ignore"):
        return _fixed_step_transition(model, M, h, m, theta, streams, jitter, False, _leapfrog_stepper(model, M))


def exact_bp_transition(model, M, h, m, theta, rng):
    """Biased-progressive selection over an orbit built with the exact
    Hamiltonian flow of a Gaussian target (fixed 2^m states)."""
    from .oracles import exact_gaussian_flow

    precision = model.precision_diag

    def step(state, t):
        nxt = exact_gaussian_flow(M, state.theta, state.rho, t, precision)
        logp, grad = model.evaluate(nxt.theta)
        H = -logp + M.kinetic(nxt.rho)
        return PhasePoint(nxt.theta, nxt.rho, logp, grad), H, 1, math.isfinite(H)

    streams = as_streams(rng)
    theta = np.asarray(theta, dtype=float)
    return _fixed_step_transition(model, M, h, m, theta, streams, 0.0, False, step)


# ---------------------------------------------------------------- index law


def exact_bp_index(m, rng, size=None):
    """Selected index of biased-progressive sampling along an exact flow
    with m doublings: direction bits plus a uniform draw from the final
    extension."""
    if m < 1:
        raise ValueError("m must be at least 1")
    n = 1 if size is None else int(size)
    bits = rng.integers(0, 2, size=(n, m))
    half = 1 << (m - 1)
    b = bits[:, : m - 1] @ (1 << np.arange(m - 1)) if m > 1 else np.zeros(n, dtype=np.int64)
    c = rng.integers(1, half + 1, size=n)
    index = np.where(bits[:, m - 1] == 1, b + c, b - half + 1 - c)
    return int(index[0]) if size is None else index


def triangular_pmf(m, k):
    """Pr[i = k] = min(|k|, 2N - |k|) / (2 N^2) for 1 <= |k| <= 2N - 1,
    with N = 2^(m-1)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    n = 1 << (m - 1)
    k = abs(int(k))
    if not 1 <= k <= 2 * n - 1:
        return 0.0
    return min(k, 2 * n - k) / (2.0 * n * n)


# ---------------------------------------------------------------- chains


def make_kernel(name, model, M, h, m_max=10, delta=0.3, jitter=0.2, **walnuts_options):
    """Build a kernel ``(theta, streams) -> (theta, stats)`` by sampler name.

    Names: walnuts_r2p, walnuts_d, nuts, bphmc (m_max is the fixed number
    of doublings) and exact_bp (Gaussian targets only).
    """
    if name in ("walnuts_r2p", "walnuts_d"):
        dist = MicroDistribution.randomized_two_point() if name == "walnuts_r2p" else MicroDistribution.deterministic()
        cfg = WalnutsConfig(h=h, delta=delta, m_max=m_max, micro_dist=dist, jitter=jitter, **walnuts_options)
        return lambda theta, rng: walnuts_transition(model, M, cfg, theta, rng)
    if walnuts_options:
        raise ValueError(f"options {sorted(walnuts_options)} only apply to WALNUTS")
    if name == "nuts":
        return lambda theta, rng: nuts_transition(model, M, h, m_max, theta, rng, jitter)
    if name == "bphmc":
        return lambda theta, rng: bphmc_transition(model, M, h, m_max, theta, rng, jitter)
    if name == "exact_bp":
        if not hasattr(model, "precision_diag"):
            raise ValueError("exact_bp needs a Gaussian target")
        return lambda theta, rng: exact_bp_transition(model, M, h, m_max, theta, rng)
    raise ValueError(f"unknown sampler {name!r}")


def run_chain(kernel, theta0, iterations, streams, start_iteration=0, thin=1):
    """Run ``iterations`` transitions.

    Args:
        kernel: Callable (theta, TransitionStreams) -> (theta, stats).
        theta0: Initial position.
        iterations: Number of transitions.
        streams: ChainStreams for this chain.
        start_iteration: Counter offset, e.g. the number of warmup
            iterations already consumed.
        thin: Keep every ``thin``-th draw.

    Returns:
        (draws array, list of TransitionStats for every transition)
    """
    theta = np.asarray(theta0, dtype=float)
    draws = []
    stats = []
    for it in range(iterations):
        theta, st = kernel(theta, streams.transition(start_iteration + it))
        stats.append(st)
        if (it + 1) % thin == 0:
            draws.append(theta)
    return np.array(draws).reshape(len(draws), theta.size), stats
