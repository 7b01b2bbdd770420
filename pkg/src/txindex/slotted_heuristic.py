"""RTT-slotted multi-flow admission control.

Each slot the router sees every flow's window, admits whole windows in
decreasing index order while the admitted total fits the buffer, and the
flows then move up (admitted) or down (rejected) deterministically.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence, TextIO, Union

import numpy as np

from .flow_model import FlowParams, alpha_fair_reward, build_mdp, decrease_state, increase_state
from .index_engine import IndexTable, compute_indices_adaptive_greedy
from .mdp_oracle import ProblemSizeError

MAX_JOINT_STATES = 100_000
HORIZON_TOL = 1e-8

Policy = Union[str, Callable[["MultiFlowSystem"], Sequence[int]]]


class HorizonError(ValueError):
    pass


@dataclass
class MultiFlowSystem:
    flows: list  # [(FlowParams, IndexTable)]
    states: list
    buffer_capacity: int
    target_throughput: float

    def __post_init__(self):
        if len(self.states) != len(self.flows):
            raise ValueError("one state per flow required")
        for (params, _), x in zip(self.flows, self.states):
            if not 1 <= x <= params.max_window:
                raise ValueError(f"state {x} outside 1..{params.max_window}")
        if self.buffer_capacity < 1:
            raise ValueError("buffer capacity must be positive")
        if not 0 < self.target_throughput <= self.buffer_capacity:
            raise ValueError("target throughput must lie in (0, B]")

    @classmethod
    def from_params(cls, params: Sequence[FlowParams], buffer_capacity: int,
                    target_throughput: float | None = None) -> "MultiFlowSystem":
        flows = [(p, compute_indices_adaptive_greedy(build_mdp(p))) for p in params]
        return cls(
            flows=flows,
            states=[p.initial_window for p in params],
            buffer_capacity=buffer_capacity,
            target_throughput=buffer_capacity if target_throughput is None else target_throughput,
        )

    @property
    def n_flows(self) -> int:
        return len(self.flows)

    def copy(self) -> "MultiFlowSystem":
        return MultiFlowSystem(list(self.flows), list(self.states), self.buffer_capacity,
                               self.target_throughput)


def heuristic_actions(sys: MultiFlowSystem) -> list:
    """Admit in decreasing current-index order, skipping flows that no longer fit."""
    order = sorted(range(sys.n_flows), key=lambda k: (-sys.flows[k][1][sys.states[k]], k))
    actions = [0] * sys.n_flows
    used = 0
    for k in order:
        x = sys.states[k]
        if used + x <= sys.buffer_capacity:
            actions[k] = 1
            used += x
    return actions


def slot_outcome(sys: MultiFlowSystem, actions: Sequence[int]) -> tuple[float, int]:
    reward = 0.0
    work = 0
    for (params, _), x, a in zip(sys.flows, sys.states, actions):
        if a:
            reward += alpha_fair_reward(x, params.alpha)
            work += x
    return reward, work


def apply_actions(sys: MultiFlowSystem, actions: Sequence[int]) -> None:
    sys.states = [
        increase_state(x, p.max_window) if a else decrease_state(x, p.gamma)
        for (p, _), x, a in zip(sys.flows, sys.states, actions)
    ]


def heuristic_step(sys: MultiFlowSystem) -> tuple[list, float, int]:
    """One slot of the index heuristic; advances ``sys.states`` in place."""
    actions = heuristic_actions(sys)
    reward, work = slot_outcome(sys, actions)
    apply_actions(sys, actions)
    return actions, reward, work


def _resolve(policy: Policy) -> Callable[[MultiFlowSystem], Sequence[int]]:
    if callable(policy):
        return policy
    table = {
        "heuristic": heuristic_actions,
        "always-admit": lambda s: [1] * s.n_flows,
        "always-reject": lambda s: [0] * s.n_flows,
    }
    try:
        return table[policy]
    except KeyError:
        raise ValueError(f"unknown policy {policy!r}") from None


def default_horizon(beta: float) -> int:
    return math.ceil(math.log(HORIZON_TOL) / math.log(beta)) + 1


def evaluate_discounted_run(sys: MultiFlowSystem, policy: Policy = "heuristic",
                            horizon: int | None = None, beta: float | None = None
                            ) -> tuple[float, float]:
    """Discounted (reward, work) along the deterministic trajectory from ``sys.states``.

    ``always-admit`` counts the full sent windows and ignores the buffer bound;
    that is the quantity the overload condition is stated in.
    """
    beta = sys.flows[0][0].beta if beta is None else beta
    horizon = default_horizon(beta) if horizon is None else horizon
    if beta ** horizon >= HORIZON_TOL:
        raise HorizonError(f"beta^T = {beta ** horizon:.3g} is not below {HORIZON_TOL}")
    decide = _resolve(policy)
    run = sys.copy()
    total_r = total_w = 0.0
    disc = 1.0
    for _ in range(horizon):
        actions = decide(run)
        r, w = slot_outcome(run, actions)
        total_r += disc * r
        total_w += disc * w
        apply_actions(run, actions)
        disc *= beta
    return total_r, total_w


def is_overloaded(sys: MultiFlowSystem, beta: float | None = None) -> bool:
    beta = sys.flows[0][0].beta if beta is None else beta
    _, work = evaluate_discounted_run(sys, "always-admit", beta=beta)
    return work > sys.target_throughput / (1 - beta)


def joint_optimal_small(sys: MultiFlowSystem, beta: float | None = None,
                        tol: float = 1e-10) -> float:
    """Optimal discounted reward with the per-slot buffer bound enforced exactly.

    Value iteration over the product state space; only action vectors whose
    admitted windows sum to at most B are allowed.
    """
    beta = sys.flows[0][0].beta if beta is None else beta
    sizes = [p.max_window for p, _ in sys.flows]
    n_joint = math.prod(sizes)
    if n_joint > MAX_JOINT_STATES:
        raise ProblemSizeError(f"joint state space {n_joint} exceeds {MAX_JOINT_STATES}")
    K = len(sizes)
    grids = np.indices(sizes).reshape(K, -1)  # 0-based window per flow
    mdps = [build_mdp(p) for p, _ in sys.flows]
    succ = []
    rewards = []
    feasible = []
    for acts in itertools.product((0, 1), repeat=K):
        nxt = np.zeros(n_joint, dtype=np.intp)
        rew = np.zeros(n_joint)
        load = np.zeros(n_joint)
        for k, (mdp, a) in enumerate(zip(mdps, acts)):
            x = grids[k]
            nk = mdp.next1[x] if a else mdp.next0[x]
            nxt = nxt * sizes[k] + nk
            if a:
                rew += mdp.reward1[x]
                load += x + 1
        succ.append(nxt)
        rewards.append(rew)
        feasible.append(load <= sys.buffer_capacity)
    succ = np.array(succ)
    rewards = np.where(np.array(feasible), np.array(rewards), -np.inf)
    v = np.zeros(n_joint)
    threshold = tol * (1 - beta) / (2 * beta)
    while True:
        v_new = np.max(rewards + beta * v[succ], axis=0)
        if np.max(np.abs(v_new - v)) < threshold:
            v = v_new
            break
        v = v_new
    start = np.ravel_multi_index([x - 1 for x in sys.states], sizes)
    return float(v[start])


def run_trace(sys: MultiFlowSystem, steps: int, policy: Policy = "heuristic") -> list:
    """Rows ``(t, X_1..X_K, a_1..a_K, slot_reward, slot_work)``; ``sys`` is not modified."""
    decide = _resolve(policy)
    run = sys.copy()
    rows = []
    for t in range(steps):
        actions = list(decide(run))
        r, w = slot_outcome(run, actions)
        rows.append((t, *run.states, *actions, r, w))
        apply_actions(run, actions)
    return rows


def write_trace_csv(rows: list, n_flows: int, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", *[f"X_{k}" for k in range(1, n_flows + 1)],
                *[f"a_{k}" for k in range(1, n_flows + 1)], "slot_reward", "slot_work"])
    for row in rows:
        w.writerow([*row[:-2], repr(float(row[-2])), row[-1]])
