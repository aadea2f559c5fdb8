"""Leapfrog integration and energy-error-controlled micro step selection."""

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .phase import PhasePoint

ENVELOPE = "envelope"
ENDPOINT = "endpoint"


class DivergenceError(ArithmeticError):
    """A leapfrog update produced a non-finite state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class DivergentMacroStep(ArithmeticError):
    """No admissible micro step count was found up to the halving cap."""

    def __init__(self, message, best_error=math.inf, grads_used=0):
        super().__init__(message)
        self.best_error = best_error
        self.grads_used = grads_used


def _evaluated(model, z):
    """Return (logp, grad, evaluations) at z, reusing the cache if present."""
    if z.grad is not None:
        return z.logp, z.grad, 0
    logp, grad = model.evaluate(z.theta)
    return logp, grad, 1


def _leapfrog(model, M, theta, rho, grad, h):
    half = 0.5 * h
    rho_half = rho + half * grad
    theta = theta + h * M.inv_apply(rho_half)
    logp, grad = model.evaluate(theta)
    rho = rho_half + half * grad
    return theta, rho, logp, grad


@dataclass
class Trajectory:
    """Result of integrating n leapfrog steps from a start point."""

    end: PhasePoint
    H_start: float
    H_end: float
    H_min: float
    H_max: float
    grads: int
    finite: bool

    def error(self, mode):
        if not self.finite:
            return math.inf
        if mode == ENDPOINT:
            return abs(self.H_end - self.H_start)
        return self.H_max - self.H_min


def integrate(model, M, z, h, n):
    """Integrate ``n`` steps of size ``h`` from ``z``, tracking H.

    Stops early (with ``finite=False``) as soon as a non-finite energy shows
    up; never raises.
    """
    logp, grad, grads = _evaluated(model, z)
    theta, rho = z.theta, z.rho
    H0 = -logp + M.kinetic(rho)
    H_min = H_max = H = H0
    finite = math.isfinite(H0)
    if finite:
        for _ in range(n):
            theta, rho, logp, grad = _leapfrog(model, M, theta, rho, grad, h)
            grads += 1
            H = -logp + M.kinetic(rho)
            if not math.isfinite(H):
                finite = False
                break
            if H < H_min:
                H_min = H
            elif H > H_max:
                H_max = H
    end = PhasePoint(theta, rho, logp, grad)
    return Trajectory(end, H0, H, H_min, H_max, grads, finite)


def leapfrog_step(model, M, z, h):
    """One leapfrog step of signed size ``h`` (negative h steps backward)."""
    if h == 0:
        raise ValueError("step size must be nonzero")
    with np.errstate(all="ignore"):
        logp, grad, _ = _evaluated(model, z)
        theta, rho, logp, grad = _leapfrog(model, M, z.theta, z.rho, grad, h)
    out = PhasePoint(theta, rho, logp, grad)
    if not (math.isfinite(logp) and np.all(np.isfinite(theta)) and np.all(np.isfinite(rho))):
        raise DivergenceError("leapfrog step produced a non-finite state", out)
    return out


def leapfrog_n(model, M, z, h, L):
    """Compose ``L`` leapfrog steps.

    Returns:
        The end point and the (H_min, H_max) envelope over all L+1 states.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    if h == 0:
        raise ValueError("step size must be nonzero")
    with np.errstate(all="ignore"):
        traj = integrate(model, M, z, h, L)
    if not traj.finite:
        raise DivergenceError("leapfrog trajectory produced a non-finite state", traj.end)
    return traj.end, (traj.H_min, traj.H_max)


@dataclass
class MicroResult:
    """Outcome of the micro step search for one macro step."""

    ell: int
    endpoint: PhasePoint
    H_max: float
    H_min: float
    H_start: float
    H_end: float
    grads_used: int

    @property
    def halvings(self):
        return self.ell.bit_length() - 1

    @property
    def envelope(self):
        return self.H_max - self.H_min


def micro(model, M, z, h, delta, mode=ENVELOPE, min_halvings=0, halvings_cap=20):
    """Find the smallest ell = 2^k, k >= min_halvings, whose ell-step
    trajectory of size h/ell from z keeps the energy error within delta.

    Every candidate restarts from z. Raises DivergentMacroStep when no
    candidate up to 2^halvings_cap qualifies.
    """
    if not h > 0:
        raise ValueError("macro step size must be positive")
    if not delta > 0:
        raise ValueError("delta must be positive")
    if not 0 <= min_halvings <= halvings_cap:
        raise ValueError("need 0 <= min_halvings <= halvings_cap")
    if mode not in (ENVELOPE, ENDPOINT):
        raise ValueError(f"unknown energy error mode {mode!r}")
    with np.errstate(all="ignore"):
        return _micro(model, M, z, h, delta, mode, min_halvings, halvings_cap)


def _micro(model, M, z, h, delta, mode, min_halvings, halvings_cap):
    grads = 0
    best = math.inf
    for k in range(min_halvings, halvings_cap + 1):
        ell = 1 << k
        traj = integrate(model, M, z, h / ell, ell)
        grads += traj.grads
        err = traj.error(mode)
        if err <= delta:
            return MicroResult(ell, traj.end, traj.H_max, traj.H_min, traj.H_start, traj.H_end, grads)
        if err < best:
            best = err
    raise DivergentMacroStep(f"no micro step count up to 2^{halvings_cap} met delta={delta}", best, grads)


class MicroDistribution:
    """Distribution of the micro step count given the micro() baseline.

    Mass sits on doublings of the baseline: ``weights[k]`` is the
    probability of using ``baseline * 2**k``.
    """

    def __init__(self, kind, weights):
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or weights.size == 0 or np.any(weights < 0):
            raise ValueError("weights must be a nonempty nonnegative vector")
        if not math.isclose(weights.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("weights must sum to 1")
        self.kind = kind
        self.weights = weights
        self._cdf = np.cumsum(weights).tolist()
        self._log_weights = [math.log(w) if w > 0 else -math.inf for w in weights]

    @classmethod
    def deterministic(cls):
        return cls("deterministic", [1.0])

    @classmethod
    def randomized_two_point(cls):
        return cls("randomized_two_point", [2.0 / 3.0, 1.0 / 3.0])

    @classmethod
    def custom(cls, weights):
        return cls("custom", weights)

    @classmethod
    def from_name(cls, name):
        if name in ("deterministic", "d"):
            return cls.deterministic()
        if name in ("randomized_two_point", "r2p"):
            return cls.randomized_two_point()
        raise ValueError(f"unknown micro distribution {name!r}")

    @property
    def random(self):
        return self.weights.size > 1

    def sample(self, baseline, rng):
        """Draw a factor; consumes one uniform unless the law is a point mass."""
        if self.weights.size == 1:
            return baseline
        k = bisect.bisect_right(self._cdf, rng.random())
        return baseline << min(k, self.weights.size - 1)

    def log_pmf(self, ell, baseline):
        if baseline is None or ell < baseline or ell % baseline:
            return -math.inf
        ratio = ell // baseline
        k = ratio.bit_length() - 1
        if ratio != 1 << k or k >= self.weights.size:
            return -math.inf
        return self._log_weights[k]

    def pmf(self, ell, baseline):
        return math.exp(self.log_pmf(ell, baseline))

    def max_offset(self):
        return self.weights.size - 1

    def __repr__(self):
        return f"MicroDistribution({self.kind!r}, {self.weights.tolist()})"


def sample_micro_factor(dist, ell_tilde, rng):
    return dist.sample(ell_tilde, rng)


def pmf_micro(dist, ell, ell_tilde):
    return dist.pmf(ell, ell_tilde)
