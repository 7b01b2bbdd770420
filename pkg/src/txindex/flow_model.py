"""Single AIMD flow as a deterministic Markov decision process.

States are congestion windows ``1..N`` (1-based everywhere in the public API).
Action 1 admits the flow's whole window, action 0 rejects it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Guards floor(gamma * n) against representation error, e.g. (2/3) * 3.
FLOOR_EPS = 1e-9


class InvalidParameterError(ValueError):
    pass


def alpha_fair_reward(n: float, alpha: float) -> float:
    """One-period generalized alpha-fair utility of transmitting ``n`` packets."""
    if n < 1:
        raise InvalidParameterError(f"state must be >= 1, got {n}")
    if alpha < 0:
        raise InvalidParameterError(f"alpha must be >= 0, got {alpha}")
    if alpha == 1:
        return math.log1p(n)
    return ((1.0 + n) ** (1.0 - alpha) - 1.0) / (1.0 - alpha)


def decrease_state(n: int, gamma: float) -> int:
    return max(math.floor(gamma * n + FLOOR_EPS), 1)


def increase_state(n: int, max_window: int) -> int:
    return min(n + 1, max_window)


def cwnd_ack_update(cwnd: float, max_window: int) -> float:
    """Congestion-avoidance growth for one new-data ACK.

    The increment uses the integer part of the window, so the integer window
    advances by one after ``floor(cwnd)`` ACKs.
    """
    return min(cwnd + 1.0 / math.floor(cwnd), float(max_window))


def cwnd_loss_update(cwnd: float, gamma: float) -> float:
    return float(max(math.floor(gamma * cwnd + FLOOR_EPS), 1))


@dataclass(frozen=True)
class FlowParams:
    max_window: int
    gamma: float
    alpha: float
    beta: float
    initial_window: int = 1

    def __post_init__(self):
        if int(self.max_window) != self.max_window or self.max_window < 1:
            raise InvalidParameterError(f"max_window must be a positive integer, got {self.max_window}")
        if not 0 <= self.gamma < 1:
            raise InvalidParameterError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 < self.beta < 1:
            raise InvalidParameterError(f"beta must lie in (0, 1), got {self.beta}")
        if self.alpha < 0:
            raise InvalidParameterError(f"alpha must be >= 0, got {self.alpha}")
        if not 1 <= self.initial_window <= self.max_window:
            raise InvalidParameterError(
                f"initial_window must lie in [1, {self.max_window}], got {self.initial_window}"
            )


@dataclass(frozen=True, eq=False)
class FlowMdp:
    """Materialized work/reward vectors and successor maps.

    Arrays are 0-based internally (entry ``n - 1`` is state ``n``); use
    :meth:`succ1` / :meth:`succ0` for 1-based successor lookups.
    """

    params: FlowParams
    work0: np.ndarray
    work1: np.ndarray
    reward0: np.ndarray
    reward1: np.ndarray
    next1: np.ndarray = field(repr=False)  # 0-based successor index under admit
    next0: np.ndarray = field(repr=False)  # 0-based successor index under reject

    @property
    def n_states(self) -> int:
        return self.params.max_window

    @property
    def states(self) -> range:
        return range(1, self.n_states + 1)

    def succ1(self, n: int) -> int:
        return int(self.next1[n - 1]) + 1

    def succ0(self, n: int) -> int:
        return int(self.next0[n - 1]) + 1


def build_mdp(params: FlowParams) -> FlowMdp:
    N = params.max_window
    states = range(1, N + 1)
    work1 = np.arange(1, N + 1, dtype=float)
    reward1 = np.array([alpha_fair_reward(n, params.alpha) for n in states])
    next1 = np.array([increase_state(n, N) - 1 for n in states], dtype=np.intp)
    next0 = np.array([decrease_state(n, params.gamma) - 1 for n in states], dtype=np.intp)
    for arr in (work1, reward1, next1, next0):
        arr.setflags(write=False)
    zeros = np.zeros(N)
    zeros.setflags(write=False)
    return FlowMdp(params, zeros, work1, zeros, reward1, next1, next0)
