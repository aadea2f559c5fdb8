import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from walnuts.integrator import (
    DivergenceError,
    DivergentMacroStep,
    MicroDistribution,
    integrate,
    leapfrog_n,
    leapfrog_step,
    micro,
    pmf_micro,
    sample_micro_factor,
)
from walnuts.oracles import exact_gaussian_flow
from walnuts.phase import MassMatrix, PhasePoint, hamiltonian, momentum_flip, sample_momentum
from walnuts.targets import FunnelTarget, GaussianTarget, TargetModel


# ---------------------------------------------------------------- phase


def test_mass_matrix_kinds_agree():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    dense = MassMatrix.dense(A)
    v = np.array([0.7, -1.1])
    np.testing.assert_allclose(dense.apply(dense.inv_apply(v)), v)
    assert dense.kinetic(v) == pytest.approx(0.5 * v @ np.linalg.solve(A, v))
    diag = MassMatrix.diagonal([2.0, 0.5])
    assert diag.kinetic(v) == pytest.approx(0.5 * (v[0] ** 2 / 2.0 + v[1] ** 2 / 0.5))
    assert MassMatrix.identity(2).kinetic(v) == pytest.approx(0.5 * v @ v)


def test_mass_matrix_rejects_bad_input():
    with pytest.raises(ValueError):
        MassMatrix.diagonal([1.0, 0.0])
    with pytest.raises(ValueError):
        MassMatrix.dense([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        MassMatrix.dense([[1.0, 0.5], [0.0, 1.0]])


def test_momentum_covariance_matches_mass():
    A = np.array([[2.0, 0.6], [0.6, 1.0]])
    M = MassMatrix.dense(A)
    rng = np.random.default_rng(0)
    draws = np.array([sample_momentum(M, rng) for _ in range(40000)])
    np.testing.assert_allclose(np.cov(draws.T), A, atol=0.05)


def test_mass_matrix_from_csv(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("2.0,0.5\n0.5,1.0\n")
    assert MassMatrix.from_csv(p).kind == "dense"
    q = tmp_path / "d.csv"
    q.write_text("2.0,3.0,4.0\n")
    M = MassMatrix.from_csv(q)
    assert M.kind == "diagonal" and M.dim == 3


def test_hamiltonian_and_flip():
    m = GaussianTarget(2)
    M = MassMatrix.identity(2)
    z = PhasePoint(np.array([1.0, 0.0]), np.array([0.0, 2.0]))
    assert hamiltonian(m, M, z) == pytest.approx(0.5 + 2.0)
    assert np.array_equal(momentum_flip(z).rho, -z.rho)
    with pytest.raises(ValueError):
        hamiltonian(m, M, PhasePoint(np.zeros(3), np.zeros(3)))


# ---------------------------------------------------------------- leapfrog


def test_single_step_values():
    m = GaussianTarget(1)
    M = MassMatrix.identity(1)
    out = leapfrog_step(m, M, PhasePoint(np.array([1.0]), np.array([0.0])), 0.1)
    assert out.theta[0] == pytest.approx(0.995)
    assert out.rho[0] == pytest.approx(-0.09975)
    assert out.logp == pytest.approx(-0.4950125)


def test_negative_step_reverses():
    m = FunnelTarget(3)
    M = MassMatrix.identity(4)
    z = PhasePoint(np.array([0.5, 0.2, -0.3, 1.0]), np.array([0.1, -0.4, 0.2, 0.3]))
    back = leapfrog_step(m, M, leapfrog_step(m, M, z, 0.05), -0.05)
    np.testing.assert_allclose(back.theta, z.theta, atol=1e-12)
    np.testing.assert_allclose(back.rho, z.rho, atol=1e-12)


def test_leapfrog_matches_exact_flow_for_small_steps():
    m = GaussianTarget(2, scales=[1.0, 2.0])
    M = MassMatrix.identity(2)
    z = PhasePoint(np.array([1.0, -1.0]), np.array([0.5, 0.2]))
    end, _ = leapfrog_n(m, M, z, 1e-3, 1000)
    exact = exact_gaussian_flow(M, z.theta, z.rho, 1.0, precision=m.precision_diag)
    np.testing.assert_allclose(end.theta, exact.theta, atol=1e-6)


def test_exact_flow_dense_and_diagonal_agree():
    M = MassMatrix.identity(2)
    p = np.array([1.0, 4.0])
    a = exact_gaussian_flow(M, np.array([1.0, 0.5]), np.array([0.0, 1.0]), 0.7, precision=p)
    b = exact_gaussian_flow(MassMatrix.dense(np.eye(2)), np.array([1.0, 0.5]), np.array([0.0, 1.0]), 0.7, precision=np.diag(p))
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-12)
    np.testing.assert_allclose(a.rho, b.rho, atol=1e-12)


def test_envelope_covers_all_states():
    m = GaussianTarget(1)
    M = MassMatrix.identity(1)
    z = PhasePoint(np.array([1.0]), np.array([0.0]))
    end, (lo, hi) = leapfrog_n(m, M, z, 0.5, 8)
    Hs = [hamiltonian(m, M, z)]
    state = z
    for _ in range(8):
        state = leapfrog_step(m, M, state, 0.5)
        Hs.append(hamiltonian(m, M, state))
    assert lo == pytest.approx(min(Hs))
    assert hi == pytest.approx(max(Hs))


class _Blowup(TargetModel):
    def __init__(self):
        super().__init__(1)

    def _log_density_and_grad(self, theta):
        if theta[0] > 1.0:
            return -math.inf, np.array([np.nan])
        return -0.5 * float(theta @ theta), -theta


def test_nonfinite_raises_divergence():
    m = _Blowup()
    M = MassMatrix.identity(1)
    with pytest.raises(DivergenceError):
        leapfrog_n(m, M, PhasePoint(np.array([0.9]), np.array([5.0])), 0.1, 5)
    traj = integrate(m, M, PhasePoint(np.array([0.9]), np.array([5.0])), 0.1, 5)
    assert not traj.finite


def test_argument_validation():
    m = GaussianTarget(1)
    M = MassMatrix.identity(1)
    z = PhasePoint(np.zeros(1), np.ones(1))
    with pytest.raises(ValueError):
        leapfrog_step(m, M, z, 0.0)
    with pytest.raises(ValueError):
        leapfrog_n(m, M, z, 0.1, 0)
    with pytest.raises(ValueError):
        micro(m, M, z, -1.0, 0.3)
    with pytest.raises(ValueError):
        micro(m, M, z, 1.0, 0.0)


# ---------------------------------------------------------------- micro


def test_micro_no_halving_for_small_step():
    m = GaussianTarget(1)
    M = MassMatrix.identity(1)
    res = micro(m, M, PhasePoint(np.array([1.0]), np.array([0.0])), 0.1, 0.3)
    assert res.ell == 1
    assert res.envelope == pytest.approx(1.2469e-5, rel=1e-3)


def test_micro_is_minimal_power_of_two():
    m = FunnelTarget(3)
    M = MassMatrix.identity(4)
    rng = np.random.default_rng(1)
    for _ in range(20):
        z = PhasePoint(m.draw(rng), rng.normal(size=4))
        res = micro(m, M, z, 0.8, 0.05)
        assert res.ell & (res.ell - 1) == 0
        traj = integrate(m, M, z, 0.8 / res.ell, res.ell)
        assert traj.error("envelope") <= 0.05
        if res.ell > 1:
            smaller = integrate(m, M, z, 0.8 * 2 / res.ell, res.ell // 2)
            assert smaller.error("envelope") > 0.05


def test_micro_gradient_accounting_from_cold_start():
    m = FunnelTarget(3)
    M = MassMatrix.identity(4)
    z = PhasePoint(np.array([-3.0, 0.1, 0.0, -0.1]), np.array([2.0, 1.0, 1.0, 1.0]))
    m.reset_counter()
    res = micro(m, M, z, 1.0, 0.01)
    k = res.halvings
    # every candidate restarts from z and evaluates its gradient there
    assert res.grads_used == sum((1 << j) + 1 for j in range(k + 1))
    assert m.grad_evals == res.grads_used


def test_micro_min_halvings_and_cap():
    m = GaussianTarget(1)
    M = MassMatrix.identity(1)
    z = PhasePoint(np.array([1.0]), np.array([0.0]))
    assert micro(m, M, z, 0.1, 0.3, min_halvings=2).ell == 4
    with pytest.raises(DivergentMacroStep):
        micro(m, M, PhasePoint(np.array([30.0]), np.array([30.0])), 3.0, 1e-12, halvings_cap=3)


def test_endpoint_mode_never_needs_more_halvings():
    m = FunnelTarget(3)
    M = MassMatrix.identity(4)
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = PhasePoint(m.draw(rng), rng.normal(size=4))
        assert micro(m, M, z, 0.5, 0.1, mode="endpoint").ell <= micro(m, M, z, 0.5, 0.1).ell


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 1.5))
def test_micro_reversible_on_gaussian(q, p, h):
    # the backward factor at the forward endpoint is never larger
    m = GaussianTarget(1)
    M = MassMatrix.identity(1)
    z = PhasePoint(np.array([q]), np.array([p]))
    fwd = micro(m, M, z, h, 0.2)
    back = micro(m, M, fwd.endpoint.flip(), h, 0.2)
    assert back.ell <= fwd.ell


# ---------------------------------------------------------------- micro factor law


def test_r2p_pmf():
    d = MicroDistribution.randomized_two_point()
    assert pmf_micro(d, 4, 4) == pytest.approx(2 / 3)
    assert pmf_micro(d, 8, 4) == pytest.approx(1 / 3)
    assert pmf_micro(d, 2, 4) == 0.0
    assert pmf_micro(d, 16, 4) == 0.0
    assert pmf_micro(d, 8, None) == 0.0


def test_deterministic_law_uses_no_randomness():
    d = MicroDistribution.deterministic()
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state
    assert sample_micro_factor(d, 8, rng) == 8
    assert rng.bit_generator.state == before
    assert pmf_micro(d, 8, 8) == 1.0


def test_r2p_sampling_frequencies():
    d = MicroDistribution.randomized_two_point()
    rng = np.random.default_rng(0)
    draws = np.array([d.sample(2, rng) for _ in range(30000)])
    assert set(np.unique(draws)) == {2, 4}
    assert abs((draws == 4).mean() - 1 / 3) < 0.01


def test_custom_law_validation():
    assert MicroDistribution.custom([0.5, 0.25, 0.25]).max_offset() == 2
    with pytest.raises(ValueError):
        MicroDistribution.custom([0.5, 0.4])
    with pytest.raises(ValueError):
        MicroDistribution.from_name("geometric")
