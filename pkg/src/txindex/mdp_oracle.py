"""Brute-force solvers for the single-flow problem with transmission cost nu.

These are deliberately independent of the adaptive-greedy index computation:
value iteration and policy iteration solve the Bellman equation directly,
enumeration scores every admission set, and bisection recovers an index as the
cost at which a state's optimal action flips.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow_model import FlowMdp
from .index_engine import PolicySet, policy_totals

MAX_ENUM_STATES = 14
EPS = np.finfo(float).eps


class ProblemSizeError(ValueError):
    pass


class NonMonotoneSwitchingError(RuntimeError):
    """Optimal action at a state flips more than once as nu grows."""


@dataclass(frozen=True)
class NuProblem:
    mdp: FlowMdp
    nu: float

    def net_reward1(self) -> np.ndarray:
        return self.mdp.reward1 - self.nu * self.mdp.work1

    def net_reward0(self) -> np.ndarray:
        return self.mdp.reward0 - self.nu * self.mdp.work0


def _q_values(p: NuProblem, value: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = p.mdp.params.beta
    return p.net_reward1() + b * value[p.mdp.next1], p.net_reward0() + b * value[p.mdp.next0]


def _tie_tol(tol: float, value: np.ndarray) -> float:
    return max(tol, 64 * EPS * max(1.0, float(np.max(np.abs(value)))))


def _admit_from_values(p: NuProblem, value: np.ndarray, tol: float) -> PolicySet:
    q1, q0 = _q_values(p, value)
    # ties admit
    return PolicySet.of(np.flatnonzero(q1 >= q0 - _tie_tol(tol, value)) + 1)


def _bellman(p: NuProblem, value: np.ndarray) -> np.ndarray:
    q1, q0 = _q_values(p, value)
    return np.maximum(q1, q0)


def _doubling_operator(p: NuProblem) -> np.ndarray:
    """One-step (max, +) transfer matrix: best net reward of moving i -> j."""
    N = p.mdp.n_states
    A = np.full((N, N), -np.inf)
    rows = np.arange(N)
    for nxt, r in ((p.mdp.next1, p.net_reward1()), (p.mdp.next0, p.net_reward0())):
        A[rows, nxt] = np.maximum(A[rows, nxt], r)
    return A


def solve_value_iteration(p: NuProblem, tol: float = 1e-10, method: str = "doubling",
                          max_iter: int = 10_000_000) -> tuple[np.ndarray, PolicySet]:
    """Value iteration from V = 0 until the sup-norm step is below tol(1-b)/(2b).

    ``method="plain"`` applies the Bellman operator one step at a time.
    ``method="doubling"`` reaches iterate 2k from iterate k by squaring the
    k-step (max, +) transfer matrix, so beta close to one costs O(log) squarings
    instead of O(1/(1-beta)) sweeps.  Both return the same kind of iterate.

    The plain sweep floors the threshold at a few ulps of |V| since for beta
    near one it can sit below double precision; the doubling path instead
    stops once the a priori tail bound beta^k r_max / (1 - beta) is below tol/2.
    """
    b = p.mdp.params.beta
    threshold = tol * (1 - b) / (2 * b)

    def small(v_new, v_old):
        step = float(np.max(np.abs(v_new - v_old)))
        return step < max(threshold, 16 * EPS * max(1.0, float(np.max(np.abs(v_new)))))

    if method == "plain":
        v = np.zeros(p.mdp.n_states)
        for _ in range(max_iter):
            v_new = _bellman(p, v)
            if small(v_new, v):
                return v_new, _admit_from_values(p, v_new, tol)
            v = v_new
        raise RuntimeError("value iteration did not converge")
    if method != "doubling":
        raise ValueError(f"unknown method {method!r}")

    A = _doubling_operator(p)
    r_max = max(float(np.max(np.abs(p.net_reward1()))), float(np.max(np.abs(p.net_reward0()))))
    k = 1
    while True:
        disc = b ** k  # direct power; repeated squaring compounds rounding
        v = np.max(A, axis=1)  # k-step iterate from V = 0
        v_next = _bellman(p, v)
        # the k-step iterate is within beta^k r_max / (1 - beta) of the fixed point
        tail = disc * b * r_max / (1 - b)
        if np.max(np.abs(v_next - v)) < threshold or tail < tol / 2:
            return v_next, _admit_from_values(p, v_next, tol)
        # A_2k[i, j] = max_m A_k[i, m] + beta^k A_k[m, j]
        scaled = np.where(np.isneginf(A), -np.inf, disc * A)
        A = np.max(A[:, :, None] + scaled[None, :, :], axis=1)
        k *= 2


def _dense_policy_value(p: NuProblem, mask: np.ndarray) -> np.ndarray:
    # (I - beta P_S) v = c_S, solved densely; kept separate from the graph walk
    # the index engine uses so the two routes do not share evaluation code.
    mdp = p.mdp
    N = mdp.n_states
    nxt = np.where(mask, mdp.next1, mdp.next0)
    A = np.eye(N)
    A[np.arange(N), nxt] -= mdp.params.beta
    return np.linalg.solve(A, np.where(mask, p.net_reward1(), p.net_reward0()))


def solve_policy_iteration(p: NuProblem, tol: float = 1e-10,
                           initial: np.ndarray | None = None) -> tuple[np.ndarray, PolicySet]:
    """Howard policy iteration with exact evaluation; switches only on strict gains."""
    mdp = p.mdp
    mask = np.ones(mdp.n_states, dtype=bool) if initial is None else initial.copy()
    for _ in range(10 * mdp.n_states + 10):
        value = _dense_policy_value(p, mask)
        q1, q0 = _q_values(p, value)
        slack = _tie_tol(tol, value)
        new = np.where(mask, q1 >= q0 - slack, q1 > q0 + slack)
        if np.array_equal(new, mask):
            return value, _admit_from_values(p, value, tol)
        mask = new
    raise RuntimeError("policy iteration did not terminate")


def all_policy_totals(mdp: FlowMdp) -> tuple[np.ndarray, np.ndarray]:
    """Work and reward totals for every admission set, rows indexed by bitmask."""
    N = mdp.n_states
    if N > MAX_ENUM_STATES:
        raise ProblemSizeError(f"enumeration limited to N <= {MAX_ENUM_STATES}, got {N}")
    M = 1 << N
    work = np.empty((M, N))
    reward = np.empty((M, N))
    bits = (np.arange(M)[:, None] >> np.arange(N)[None, :]) & 1
    for m in range(M):
        work[m], reward[m] = policy_totals(mdp, bits[m].astype(bool))
    return work, reward


def enumerate_optimal_policy(p: NuProblem, start: int,
                             totals: tuple[np.ndarray, np.ndarray] | None = None
                             ) -> tuple[PolicySet, float]:
    """Best admission set for ``start`` by exhaustive search, with its objective.

    ``totals`` may carry a precomputed :func:`all_policy_totals` result.
    Among optimal sets the lowest bitmask wins.
    """
    work, reward = totals if totals is not None else all_policy_totals(p.mdp)
    obj = reward[:, start - 1] - p.nu * work[:, start - 1]
    best = int(np.argmax(obj))
    return PolicySet.from_mask(best, p.mdp.n_states), float(obj[best])


def _admits(mdp: FlowMdp, n: int, nu: float, tol: float) -> bool:
    return n in solve_policy_iteration(NuProblem(mdp, nu), tol=tol)[1]


def switching_profile(mdp: FlowMdp, grid) -> np.ndarray:
    """Boolean matrix [len(grid), N]: is admitting optimal at each state for each nu."""
    out = np.zeros((len(grid), mdp.n_states), dtype=bool)
    init = None
    for k, nu in enumerate(grid):
        _, S = solve_policy_iteration(NuProblem(mdp, nu), initial=init)
        out[k] = S.mask_array(mdp.n_states)
        init = out[k]
    return out


def _bracket(mdp: FlowMdp) -> tuple[float, float]:
    return 0.0, float(mdp.reward1[-1]) + 1.0


def check_switching(mdp: FlowMdp, n_grid: int = 101) -> np.ndarray:
    """Scan a nu grid and raise if any state's action flips more than once."""
    lo, hi = _bracket(mdp)
    grid = np.linspace(lo, hi, n_grid)
    prof = switching_profile(mdp, grid)
    flips = np.count_nonzero(prof[1:] != prof[:-1], axis=0)
    bad = np.flatnonzero((flips > 1) | (prof[0] < prof[-1]))
    if bad.size:
        raise NonMonotoneSwitchingError(f"states {list(bad + 1)} switch non-monotonically in nu")
    return prof


def index_by_bisection(mdp: FlowMdp, n: int, tol: float = 1e-10, max_iter: int = 200,
                       check: bool = True) -> float:
    """Cost at which admitting stops being optimal in state ``n``."""
    if check:
        check_switching(mdp)
    lo, hi = _bracket(mdp)
    while not _admits(mdp, n, lo, tol):
        lo -= hi - lo
    while _admits(mdp, n, hi, tol):
        hi += hi - lo
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if _admits(mdp, n, mid, tol):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def indices_by_bisection(mdp: FlowMdp, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """All states' bisection indices, sharing one switching scan to narrow brackets."""
    lo0, hi0 = _bracket(mdp)
    grid = np.linspace(lo0, hi0, 101)
    prof = check_switching(mdp)
    out = np.empty(mdp.n_states)
    for n in mdp.states:
        col = prof[:, n - 1]
        if not col[0] or col[-1]:
            out[n - 1] = index_by_bisection(mdp, n, tol, max_iter, check=False)
            continue
        k = int(np.argmin(col))  # first grid point where rejecting is optimal
        lo, hi = grid[k - 1], grid[k]
        for _ in range(max_iter):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            if _admits(mdp, n, mid, tol):
                lo = mid
            else:
                hi = mid
        out[n - 1] = 0.5 * (lo + hi)
    return out


def is_nested(sets) -> bool:
    """True when each admission set contains the next (costs increasing)."""
    return all(b.admit <= a.admit for a, b in zip(sets[:-1], sets[1:]))
