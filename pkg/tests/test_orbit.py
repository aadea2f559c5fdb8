import math

import numpy as np
import pytest

from walnuts.oracles import brute_force_sub_uturn, random_orbit
from walnuts.orbit import CheckpointStack, Orbit, concat, is_u_turn, log_sum_exp_pair, streaming_subtree_check, sub_u_turn, u_turn
from walnuts.phase import MassMatrix, PhasePoint

M2 = MassMatrix.identity(2)


def pt(theta, rho):
    return PhasePoint(np.array(theta, dtype=float), np.array(rho, dtype=float))


def test_u_turn_examples():
    # both ends moving along the chord
    assert not is_u_turn(pt([0, 0], [1, 0]), pt([1, 0], [1, 0]), M2)
    # left end heading back past the start
    assert is_u_turn(pt([0, 0], [-1, 0]), pt([1, 0], [1, 0]), M2)
    # right end heading back
    assert is_u_turn(pt([0, 0], [1, 0]), pt([1, 0], [-1, 0]), M2)
    # orthogonal momenta sit on the boundary and do not count
    assert not is_u_turn(pt([0, 0], [0, 1]), pt([1, 0], [0, 1]), M2)


def test_u_turn_uses_mass_matrix():
    M = MassMatrix.diagonal([1.0, 100.0])
    left = pt([0, 0], [1, 0.5])
    right = pt([1, -1], [1, 0.5])
    assert not is_u_turn(left, right, M2)
    assert not is_u_turn(left, right, M)
    right = pt([0.1, -1], [1, 0.5])
    assert is_u_turn(left, right, M2)
    assert not is_u_turn(left, right, M)


def test_orbit_ranges_and_concat():
    a = Orbit(-2, [pt([0, 0], [0, 0])] * 2, [0.0, -1.0], [1])
    b = Orbit(0, [pt([0, 0], [0, 0])] * 2, [-0.5, -2.0], [2])
    joined = concat(a, b, 4)
    assert (joined.a, joined.b) == (-2, 1)
    assert joined.micro_factors == [1, 4, 2]
    assert joined.log_weights == [0.0, -1.0, -0.5, -2.0]
    with pytest.raises(ValueError):
        concat(b, a, 4)
    with pytest.raises(ValueError):
        concat(a, b)


def test_orbit_requires_matching_weights():
    with pytest.raises(ValueError):
        Orbit(0, [pt([0, 0], [0, 0])], [0.0, 1.0])


def test_sub_u_turn_matches_brute_force():
    rng = np.random.default_rng(0)
    hits = 0
    for n in (1, 2, 4, 8, 16, 32):
        for _ in range(50):
            orb = random_orbit(rng, n)
            got = sub_u_turn(orb, M2)
            assert got == brute_force_sub_uturn(orb, M2)
            hits += got
    assert hits > 0


def test_sub_u_turn_needs_power_of_two():
    with pytest.raises(ValueError):
        sub_u_turn(random_orbit(np.random.default_rng(0), 6), M2)


def test_straight_line_orbit_has_no_sub_u_turn():
    states = [pt([k, 0], [1, 0]) for k in range(16)]
    orb = Orbit(0, states, [0.0] * 16)
    assert not sub_u_turn(orb, M2)
    assert not u_turn(orb, M2)


def test_checkpoint_trace_order():
    stack = CheckpointStack(M2, 8, trace=True)
    for k in range(8):
        assert not stack.push(pt([k, 0], [1, 0]))
    assert stack.trace == [(1, 2), (3, 4), (1, 4), (5, 6), (7, 8), (5, 8), (1, 8)]


def test_checkpoint_memory_is_logarithmic():
    for n in (2, 16, 128):
        stack = CheckpointStack(M2, n, trace=True)
        for k in range(n):
            stack.push(pt([k, 0], [1, 0]))
        assert stack.peak_retained <= int(math.log2(n)) + 1


def test_streaming_check_equals_recursive():
    rng = np.random.default_rng(1)
    for n in (2, 4, 8, 16, 32, 64):
        for _ in range(40):
            orb = random_orbit(rng, n)
            stack = CheckpointStack(M2, n)
            stopped = any(streaming_subtree_check(stack, s, k) for k, s in enumerate(orb.states))
            assert stopped == sub_u_turn(orb, M2)


def test_streaming_check_rejects_out_of_order():
    stack = CheckpointStack(M2, 4)
    with pytest.raises(ValueError):
        streaming_subtree_check(stack, pt([0, 0], [1, 0]), 1)


def test_log_sum_exp_pair():
    assert log_sum_exp_pair(-math.inf, 2.0) == 2.0
    assert log_sum_exp_pair(1.0, -math.inf) == 1.0
    assert log_sum_exp_pair(-math.inf, -math.inf) == -math.inf
    assert log_sum_exp_pair(0.0, 0.0) == pytest.approx(math.log(2.0))
    assert log_sum_exp_pair(1000.0, 1000.0) == pytest.approx(1000.0 + math.log(2.0))
