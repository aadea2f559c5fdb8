"""Orbits on the macro grid, U-turn checks and streaming sub-U-turn checks."""

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np


@dataclass
class Orbit:
    """Consecutive states with indices ``start .. start + len - 1``.

    ``log_weights`` holds log w_j (``-inf`` for zero weight) and
    ``micro_factors[k]`` is the micro step count used between states k and
    k + 1.
    """

    start: int
    states: list
    log_weights: List[float]
    micro_factors: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.states) != len(self.log_weights):
            raise ValueError("one weight per state is required")
        if len(self.micro_factors) not in (0, len(self.states) - 1):
            raise ValueError("micro factors must cover every interval")

    def __len__(self):
        return len(self.states)

    @property
    def a(self):
        return self.start

    @property
    def b(self):
        return self.start + len(self.states) - 1

    @property
    def weights(self):
        return np.exp(np.array(self.log_weights, dtype=float))

    @property
    def left(self):
        return self.states[0]

    @property
    def right(self):
        return self.states[-1]

    def state_at(self, index):
        return self.states[index - self.start]

    def halves(self):
        n = len(self) // 2
        return (
            Orbit(self.start, self.states[:n], self.log_weights[:n], self.micro_factors[: n - 1] if self.micro_factors else []),
            Orbit(self.start + n, self.states[n:], self.log_weights[n:], self.micro_factors[n:] if self.micro_factors else []),
        )


def concat(first, second, bridge_factor=None):
    """Concatenate two orbits whose index ranges are adjacent.

    ``bridge_factor`` is the micro factor of the interval joining them; it
    is needed only when both orbits carry micro factor records.
    """
    if second.a != first.b + 1:
        raise ValueError(f"orbits {first.a}..{first.b} and {second.a}..{second.b} are not adjacent")
    factors = []
    if first.micro_factors or second.micro_factors or bridge_factor is not None:
        if bridge_factor is None:
            raise ValueError("joining micro factor records needs the bridging factor")
        factors = list(first.micro_factors) + [bridge_factor] + list(second.micro_factors)
    return Orbit(first.a, list(first.states) + list(second.states), list(first.log_weights) + list(second.log_weights), factors)


def is_u_turn(left, right, M):
    """U-turn test between two states given in orbit order."""
    v = M.inv_apply(right.theta - left.theta)
    return bool(right.rho @ v < 0 or left.rho @ v < 0)


def u_turn(orbit, M):
    return is_u_turn(orbit.left, orbit.right, M)


def _is_power_of_two(n):
    return n >= 1 and n & (n - 1) == 0


def sub_u_turn(orbit, M):
    """True if the orbit or any sub-orbit of its aligned halving hierarchy
    U-turns."""
    if not _is_power_of_two(len(orbit)):
        raise ValueError("sub-U-turn needs an orbit whose length is a power of two")
    return _sub_u_turn(orbit.states, 0, len(orbit), M)


def _sub_u_turn(states, lo, n, M):
    if n < 2:
        return False
    if is_u_turn(states[lo], states[lo + n - 1], M):
        return True
    half = n // 2
    return _sub_u_turn(states, lo, half, M) or _sub_u_turn(states, lo + half, half, M)


class CheckpointStack:
    """Incremental sub-U-turn checks over one doubling extension of
    ``length`` states.

    States are pushed in integration order. Level ``s`` keeps the first state
    of the current aligned block of size 2^s; when that block completes the
    U-turn test runs between its two ends and the boundary is released, so
    at most log2(length) + 1 states are held at once.

    Backward extensions may push states in the outward frame (momenta
    flipped, arrival order reversed); the U-turn test is invariant under
    that change of frame.
    """

    def __init__(self, M, length, trace=False):
        if length < 1 or length & (length - 1):
            raise ValueError("extension length must be a power of two")
        self.M = M
        self.levels = length.bit_length() - 1
        self.count = 0
        self._left = {}
        self.trace = [] if trace else None
        # only tracked when tracing, to keep the hot path lean
        self.peak_retained = 0

    def push(self, state):
        """Add the next state; return True if a completed block U-turns."""
        k = self.count
        self.count += 1
        for s in range(1, self.levels + 1):
            if k % (1 << s):
                break
            self._left[s] = state
        if self.trace is not None:
            held = {id(s) for s in self._left.values()} | {id(state)}
            self.peak_retained = max(self.peak_retained, len(held))
        n = k + 1
        s = 1
        while s <= self.levels and n % (1 << s) == 0:
            start = self._left.pop(s)
            if self.trace is not None:
                self.trace.append((n - (1 << s) + 1, n))
            if is_u_turn(start, state, self.M):
                return True
            s += 1
        return False


def streaming_subtree_check(stack, new_state, position_in_subtree):
    """Push ``new_state`` (0-based ``position_in_subtree``) onto ``stack``
    and report whether the extension must terminate."""
    if position_in_subtree != stack.count:
        raise ValueError("states must arrive in integration order")
    return stack.push(new_state)


def log_sum_exp_pair(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))
