"""Independent reference computations and the property checks built on them.

These are deliberately simple and slow. The ``check_*`` functions back the
``validate`` CLI subcommand and the acceptance tests.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.stats

from .integrator import ENVELOPE, integrate, micro
from .orbit import Orbit, is_u_turn
from .phase import MassMatrix, PhasePoint
from .sampler import (
    ChainStreams,
    WalnutsConfig,
    exact_bp_index,
    psi_involution,
    run_chain,
    triangular_pmf,
    walnuts_transition,
)
from .targets import FunnelTarget, GaussianTarget


def exact_gaussian_flow(M, theta, rho, t, precision=None):
    """Exact Hamiltonian flow for a centered Gaussian target.

    Args:
        M: MassMatrix.
        theta, rho: Initial state.
        t: Integration time (may be negative).
        precision: None for the identity, a vector for a diagonal precision
            or a full matrix.

    Returns:
        PhasePoint at time t.
    """
    theta = np.asarray(theta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    d = theta.size
    if M.kind != "dense" and (precision is None or np.ndim(precision) == 1):
        p = np.ones(d) if precision is None else np.asarray(precision, dtype=float)
        mass = np.ones(d) if M.kind == "identity" else M.apply(np.ones(d))
        freq = np.sqrt(p / mass)
        c, s = np.cos(freq * t), np.sin(freq * t)
        return PhasePoint(theta * c + rho * s / (mass * freq), -theta * mass * freq * s + rho * c)
    P = np.eye(d) if precision is None else np.asarray(precision, dtype=float)
    if P.ndim == 1:
        P = np.diag(P)
    gen = np.block([[np.zeros((d, d)), np.linalg.inv(M.to_array())], [-P, np.zeros((d, d))]])
    out = scipy.linalg.expm(gen * t) @ np.concatenate([theta, rho])
    return PhasePoint(out[:d], out[d:])


def numerical_jacobian_det(fn, z, eps=1e-6):
    """Determinant of the central-difference Jacobian of ``fn`` at ``z``."""
    z = np.asarray(z, dtype=float)
    n = z.size
    jac = np.empty((n, n))
    for k in range(n):
        dz = np.zeros(n)
        dz[k] = eps
        jac[:, k] = (fn(z + dz) - fn(z - dz)) / (2 * eps)
    return float(np.linalg.det(jac))


def finite_difference_grad(f, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        step = eps * max(1.0, abs(x[k]))
        up, down = x.copy(), x.copy()
        up[k] += step
        down[k] -= step
        g[k] = (f(up) - f(down)) / (2 * step)
    return g


def brute_force_sub_uturn(orbit, M):
    """Enumerate every aligned sub-orbit of size >= 2 and test it."""
    n = len(orbit)
    if n < 1 or n & (n - 1) or n > 64:
        raise ValueError("orbit length must be a power of two no larger than 64")
    size = 2
    while size <= n:
        for lo in range(0, n, size):
            if is_u_turn(orbit.states[lo], orbit.states[lo + size - 1], M):
                return True
        size *= 2
    return False


def random_orbit(rng, length, dim=2):
    states = [PhasePoint(rng.standard_normal(dim), rng.standard_normal(dim)) for _ in range(length)]
    return Orbit(0, states, [0.0] * length)


def triangular_law(m):
    """Support and probabilities of the exact-flow index law."""
    n = 1 << (m - 1)
    ks = np.array([k for k in range(-(2 * n - 1), 2 * n) if k != 0])
    return ks, np.array([triangular_pmf(m, k) for k in ks])


def forward_backward_ok(model, M, z, h, delta, mode=ENVELOPE):
    """Check that the backward micro factor at the forward endpoint does
    not exceed the forward factor."""
    fwd = micro(model, M, z, h, delta, mode)
    back = micro(model, M, fwd.endpoint.flip(), h, delta, mode)
    return back.ell <= fwd.ell, fwd.ell, back.ell


# ---------------------------------------------------------------- checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: value={self.value:.6g} threshold={self.threshold:.6g} {self.detail}".rstrip()


def check_triangular(m=5, n=200_000, seed=0):
    """Chi-square fit of exact_bp_index against the triangular law plus the
    mean absolute index."""
    rng = np.random.default_rng(seed)
    draws = exact_bp_index(m, rng, size=n)
    ks, probs = triangular_law(m)
    counts = np.array([(draws == k).sum() for k in ks])
    outside = n - counts.sum()
    chi2, p = scipy.stats.chisquare(counts, probs * n)
    mean_abs = float(np.abs(draws).mean())
    target = float(1 << (m - 1))
    rel = abs(mean_abs - target) / target
    return [
        CheckResult("triangular_chi2_p", bool(p > 1e-3 and outside == 0), float(p), 1e-3, f"chi2={chi2:.3f} outside={outside}"),
        CheckResult("triangular_mean_abs_rel_err", rel < 0.02, rel, 0.02, f"mean|i|={mean_abs:.4f} target={target:g}"),
    ]


def _random_leapfrog_case(rng, model, M):
    theta = rng.standard_normal(model.dim)
    rho = rng.standard_normal(model.dim)
    h = rng.uniform(0.01, 0.5)
    L = int(rng.integers(1, 21))
    return PhasePoint(theta, rho), h, L


def check_volume(n=1000, seed=0):
    """Reversibility and volume preservation of leapfrog_n in d=2."""
    rng = np.random.default_rng(seed)
    model = GaussianTarget(2, scales=[1.0, 0.5])
    M = MassMatrix.identity(2)
    worst_rev = 0.0
    worst_det = 0.0
    for _ in range(n):
        z, h, L = _random_leapfrog_case(rng, model, M)
        end = integrate(model, M, z, h, L).end
        back = integrate(model, M, end.flip(), h, L).end.flip()
        err = max(np.max(np.abs(back.theta - z.theta)), np.max(np.abs(back.rho - z.rho)))
        worst_rev = max(worst_rev, err)

        def flow(v):
            out = integrate(model, M, PhasePoint(v[:2], v[2:]), h, L).end
            return np.concatenate([out.theta, out.rho])

        det = numerical_jacobian_det(flow, np.concatenate([z.theta, z.rho]), eps=1e-5)
        worst_det = max(worst_det, abs(det - 1.0))
    return [
        CheckResult("leapfrog_reversibility_max_err", worst_rev < 1e-10, worst_rev, 1e-10),
        CheckResult("leapfrog_jacobian_det_max_dev", worst_det < 1e-6, worst_det, 1e-6),
    ]


def harvest_extended_states(model, M, cfg, n, seed, theta0=None):
    """Run WALNUTS and collect the augmented state of each transition."""
    streams = ChainStreams(seed)
    theta = model.initial_point(np.random.default_rng(seed)) if theta0 is None else np.asarray(theta0, dtype=float)
    out = []
    for it in range(n):
        theta, st = walnuts_transition(model, M, cfg, theta, streams.transition(it), record=True)
        out.append(st.extended)
    return out


def check_involution(n=1000, seed=0):
    """Psi composed with itself returns harvested funnel states."""
    model = FunnelTarget(5)
    M = MassMatrix.identity(model.dim)
    cfg = WalnutsConfig(h=0.36, delta=0.21)
    worst = 0.0
    nontrivial = 0
    for z in harvest_extended_states(model, M, cfg, n, seed):
        back = psi_involution(model, M, psi_involution(model, M, z))
        scale = max(1.0, float(np.max(np.abs(z.theta))), float(np.max(np.abs(z.rho))))
        err = max(np.max(np.abs(back.theta - z.theta)), np.max(np.abs(back.rho - z.rho))) / scale
        ok_aux = back.m == z.m and back.b == z.b and back.i == z.i and np.array_equal(back.micro_factors, z.micro_factors)
        if not ok_aux:
            err = math.inf
        worst = max(worst, err)
        nontrivial += z.i != 0
    return [CheckResult("psi_involution_max_err", worst < 1e-10, worst, 1e-10, f"states={n} nonzero_index={nontrivial}")]


def check_forward_backward(n=10_000, seed=0):
    """Backward micro factor never exceeds the forward one."""
    rng = np.random.default_rng(seed)
    cases = [(FunnelTarget(10), 0.36, 0.21), (FunnelTarget(10), 0.1, 0.3), (GaussianTarget(10), 0.36, 0.21), (GaussianTarget(10), 0.1, 0.3)]
    per_case = max(1, n // len(cases))
    violations = 0
    halved = 0
    for model, h, delta in cases:
        M = MassMatrix.identity(model.dim)
        for _ in range(per_case):
            theta = model.draw(rng)
            z = PhasePoint(theta, rng.standard_normal(model.dim))
            ok, fwd, _ = forward_backward_ok(model, M, z, h, delta)
            violations += not ok
            halved += fwd > 1
    return [CheckResult("forward_backward_violations", violations == 0, violations, 0, f"states={per_case * len(cases)} halved={halved}")]


def check_stationarity(n=100_000, seed=0, h=1.0, delta=0.3):
    """KS distance and variance of WALNUTS-R2P draws on the 1D Gaussian."""
    from .diagnostics import ess

    model = GaussianTarget(1)
    M = MassMatrix.identity(1)
    cfg = WalnutsConfig(h=h, delta=delta)
    streams = ChainStreams(seed)
    theta0 = model.draw(np.random.default_rng(seed))
    draws, _ = run_chain(lambda th, rng: walnuts_transition(model, M, cfg, th, rng), theta0, n, streams)
    x = draws[:, 0]
    ks = scipy.stats.kstest(x, "norm").statistic
    var = float(np.var(x))
    mcse = math.sqrt(float(np.var(x**2)) / ess(x**2))
    z = abs(var - 1.0) / mcse
    return [
        CheckResult("stationarity_ks", ks < 0.01, float(ks), 0.01, f"n={n}"),
        CheckResult("stationarity_variance_z", z < 3.0, z, 3.0, f"var={var:.4f} mcse={mcse:.4f}"),
    ]


SUITES = {
    "triangular": check_triangular,
    "volume": check_volume,
    "involution": check_involution,
    "forward_backward": check_forward_backward,
    "stationarity": check_stationarity,
}
