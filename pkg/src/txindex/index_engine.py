"""Transmission (Whittle) indices for a single AIMD flow.

The numeric route is the adaptive-greedy marginal-productivity scheme: grow an
active (admit) set one state at a time, always adding the state whose marginal
reward per unit of marginal work is largest under the current set.  The rate
at which a state enters is its index.
"""
from __future__ import annotations

import csv
import functools
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from .flow_model import FlowMdp, FlowParams, build_mdp

TOL = 1e-9
# Relative slack for treating two marginal rates as tied in the greedy argmax.
TIE_RTOL = 1e-12


class IndexabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PolicySet:
    """Admission set: states (1-based) in which the flow is admitted."""

    admit: frozenset

    @classmethod
    def of(cls, states: Iterable[int]) -> "PolicySet":
        return cls(frozenset(int(s) for s in states))

    @classmethod
    def from_mask(cls, mask: int, n_states: int) -> "PolicySet":
        return cls(frozenset(n + 1 for n in range(n_states) if mask >> n & 1))

    def mask_array(self, n_states: int) -> np.ndarray:
        m = np.zeros(n_states, dtype=bool)
        for s in self.admit:
            if not 1 <= s <= n_states:
                raise ValueError(f"state {s} outside 1..{n_states}")
            m[s - 1] = True
        return m

    def is_threshold(self) -> bool:
        return self.admit == frozenset(range(1, len(self.admit) + 1))

    def __contains__(self, n) -> bool:
        return n in self.admit

    def __len__(self) -> int:
        return len(self.admit)


@dataclass(frozen=True, eq=False)
class IndexTable:
    values: np.ndarray  # values[n - 1] is the index of state n
    indexable: bool
    monotone_nonincreasing: bool
    assignment_order: tuple  # 1-based states in the order their index was fixed
    marginal_work: Optional[np.ndarray] = None  # marginal work at selection, by state

    def __getitem__(self, n: int) -> float:
        return float(self.values[n - 1])

    def __len__(self) -> int:
        return len(self.values)


def _is_nonincreasing(seq, tol: float = TOL) -> bool:
    return all(b <= a + tol for a, b in zip(seq[:-1], seq[1:]))


# -- exact policy evaluation -------------------------------------------------

def _functional_graph_values(nxt: np.ndarray, cost: np.ndarray, beta: float) -> np.ndarray:
    """Discounted totals V = cost + beta * V[nxt] for a deterministic map.

    Every trajectory ends in a cycle; cycle states are solved with the
    closed-form geometric series, the rest by back-substitution.
    """
    n = len(nxt)
    value = np.empty(n)
    done = np.zeros(n, dtype=bool)
    pos = np.full(n, -1)
    for start in range(n):
        if done[start]:
            continue
        path = []
        i = start
        while not done[i] and pos[i] < 0:
            pos[i] = len(path)
            path.append(i)
            i = int(nxt[i])
        if not done[i]:
            # i closes a cycle made of path[pos[i]:]
            cyc = path[pos[i]:]
            L = len(cyc)
            acc = 0.0
            disc = 1.0
            for c in cyc:
                acc += disc * cost[c]
                disc *= beta
            # 1 - beta**L computed without cancellation
            v0 = acc / -math.expm1(L * math.log(beta))
            value[cyc[0]] = v0
            done[cyc[0]] = True
            for c in reversed(cyc[1:]):
                value[c] = cost[c] + beta * value[int(nxt[c])]
                done[c] = True
            path = path[: pos[i]]
        for c in reversed(path):
            value[c] = cost[c] + beta * value[int(nxt[c])]
            done[c] = True
        for c in path:
            pos[c] = -1
    return value


def policy_totals(mdp: FlowMdp, policy: PolicySet | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total discounted work and reward vectors (entry ``i - 1`` = start ``i``)."""
    mask = policy if isinstance(policy, np.ndarray) else policy.mask_array(mdp.n_states)
    nxt = np.where(mask, mdp.next1, mdp.next0)
    beta = mdp.params.beta
    work = _functional_graph_values(nxt, np.where(mask, mdp.work1, mdp.work0), beta)
    reward = _functional_graph_values(nxt, np.where(mask, mdp.reward1, mdp.reward0), beta)
    return work, reward


def evaluate_policy(mdp: FlowMdp, policy: PolicySet, start: int) -> tuple[float, float]:
    """(total discounted work, total discounted reward) from ``start`` under ``policy``."""
    work, reward = policy_totals(mdp, policy)
    return float(work[start - 1]), float(reward[start - 1])


def marginal_quantities(mdp: FlowMdp, active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Marginal work and reward of admitting once in each state, then following ``active``."""
    work, reward = policy_totals(mdp, active)
    beta = mdp.params.beta
    mw = mdp.work1 - mdp.work0 + beta * (work[mdp.next1] - work[mdp.next0])
    mr = mdp.reward1 - mdp.reward0 + beta * (reward[mdp.next1] - reward[mdp.next0])
    return mw, mr


# -- adaptive greedy ---------------------------------------------------------

def compute_indices_adaptive_greedy(mdp: FlowMdp) -> IndexTable:
    N = mdp.n_states
    active = np.zeros(N, dtype=bool)
    values = np.full(N, np.nan)
    sel_work = np.full(N, np.nan)
    order = []
    ok = True
    for _ in range(N):
        mw, mr = marginal_quantities(mdp, active)
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(mw != 0, mr / mw, np.sign(mr) * np.inf)
        rate = np.where(active, -np.inf, rate)
        best = np.nanmax(rate)
        slack = TIE_RTOL * max(1.0, abs(best)) if np.isfinite(best) else 0.0
        # lowest state among (near-)ties
        pick = int(np.flatnonzero(rate >= best - slack)[0])
        values[pick] = rate[pick]
        sel_work[pick] = mw[pick]
        if not mw[pick] > TOL:
            ok = False
        active[pick] = True
        order.append(pick + 1)
    in_order = [values[s - 1] for s in order]
    ok = ok and _is_nonincreasing(in_order)
    values.setflags(write=False)
    return IndexTable(
        values=values,
        indexable=ok,
        monotone_nonincreasing=_is_nonincreasing(values),
        assignment_order=tuple(order),
        marginal_work=sel_work,
    )


# -- closed forms for one-, two- and three-state flows -----------------------

def _ratio(mdp: FlowMdp, coeffs: dict) -> float:
    """sum_c coef * R_state / sum_c coef * W_state for {state: coef}."""
    num = sum(c * mdp.reward1[s - 1] for s, c in coeffs.items())
    den = sum(c * mdp.work1[s - 1] for s, c in coeffs.items())
    return num / den


def three_state_branches(mdp: FlowMdp) -> dict:
    """Candidate index triples for N = 3.

    ``"restart"`` applies when rejection always returns to state 1 (gamma < 2/3).
    Otherwise (3 -> 2 on reject) the greedy order is either 1, 2, 3
    (``"ordered"``) or 1, 3, 2 (``"swapped"``).
    """
    b = mdp.params.beta
    nu1 = _ratio(mdp, {1: 1.0})
    out = {}
    nu2_restart = _ratio(mdp, {2: 1 + b, 1: -b})
    out["restart"] = (
        nu1,
        nu2_restart,
        _ratio(mdp, {3: 1 + b + b * b, 1: -b, 2: -b * b}),
    )
    out["ordered"] = (
        nu1,
        _ratio(mdp, {2: 1.0, 1: -b}),
        _ratio(mdp, {3: 1 + b, 2: -b}),
    )
    out["swapped"] = (
        nu1,
        _ratio(mdp, {2: 1 - b * b, 3: b + b * b, 1: -b}),
        _ratio(mdp, {3: 1 + b, 1: -b * b}),
    )
    return out


def closed_form_indices(mdp: FlowMdp) -> Optional[IndexTable]:
    """Printed-formula indices for N <= 3; ``None`` when not applicable."""
    N = mdp.n_states
    b = mdp.params.beta
    if N == 1:
        vals = (_ratio(mdp, {1: 1.0}),)
    elif N == 2:
        vals = (_ratio(mdp, {1: 1.0}), _ratio(mdp, {2: 1 + b, 1: -b}))
    elif N == 3:
        br = three_state_branches(mdp)
        if mdp.succ0(3) == 1:
            vals = br["restart"]
        else:
            # State 3 enters second iff its marginal rate against the active
            # set {1} beats state 2's; that rate is the swapped-branch nu_3.
            vals = br["swapped"] if br["swapped"][2] > br["ordered"][1] else br["ordered"]
    else:
        return None
    values = np.array(vals, dtype=float)
    values.setflags(write=False)
    order = tuple(int(i) + 1 for i in sorted(range(N), key=lambda i: (-values[i], i)))
    return IndexTable(
        values=values,
        indexable=True,
        monotone_nonincreasing=_is_nonincreasing(values),
        assignment_order=order,
    )


# -- lookup tables used by packet sources ------------------------------------

@functools.lru_cache(maxsize=None)
def _cached_table(max_window: int, gamma: float, alpha: float, beta: float) -> IndexTable:
    return compute_indices_adaptive_greedy(build_mdp(FlowParams(max_window, gamma, alpha, beta)))


def index_table_for(params: FlowParams) -> IndexTable:
    return _cached_table(params.max_window, params.gamma, params.alpha, params.beta)


def index_lookup_table(params: FlowParams) -> np.ndarray:
    """Per-window index values, memoized per distinct (N, gamma, alpha, beta)."""
    table = index_table_for(params)
    if not table.indexable:
        warnings.warn(
            f"index computation did not confirm indexability for {params}",
            IndexabilityWarning,
            stacklevel=2,
        )
    return table.values


def write_index_csv(table: IndexTable, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["state", "index_value"])
    for n, v in enumerate(table.values, start=1):
        w.writerow([n, repr(float(v))])
