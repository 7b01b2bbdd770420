"""Grid sweeps that cross-check the index engine against the brute-force oracles."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .flow_model import FlowParams, build_mdp
from .index_engine import closed_form_indices, compute_indices_adaptive_greedy
from .mdp_oracle import (NuProblem, all_policy_totals, enumerate_optimal_policy,
                         indices_by_bisection, solve_value_iteration)

GRID_ALPHA = (0.0, 0.5, 1.0, 2.0)
GRID_BETA = (0.3, 0.9, 0.9999)
GRID_GAMMA = (0.0, 1 / 3, 0.5, 2 / 3, 0.9)
CMP_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float = 0.0
    failures: list = field(default_factory=list)
    rows: list = field(default_factory=list)


def grid_params(n_values, alphas=GRID_ALPHA, betas=GRID_BETA, gammas=GRID_GAMMA):
    for n, a, b, g in itertools.product(n_values, alphas, betas, gammas):
        yield FlowParams(n, g, a, b)


def check_closed_form(tol: float = 1e-8, **grid) -> CheckResult:
    res = CheckResult("closed-form", True)
    for p in grid_params((1, 2, 3), **grid):
        mdp = build_mdp(p)
        ag = compute_indices_adaptive_greedy(mdp).values
        cf = closed_form_indices(mdp).values
        err = float(np.max(np.abs(ag - cf)))
        res.worst = max(res.worst, err)
        res.rows.append((p, ag, cf, err))
        if not err <= tol:
            res.passed = False
            res.failures.append((p, err))
    return res


def check_bisection(max_n: int = 10, tol: float = 1e-6, **grid) -> CheckResult:
    res = CheckResult("bisection", True)
    for p in grid_params(range(1, max_n + 1), **grid):
        mdp = build_mdp(p)
        err = float(np.max(np.abs(compute_indices_adaptive_greedy(mdp).values - indices_by_bisection(mdp))))
        res.worst = max(res.worst, err)
        if not err <= tol:
            res.passed = False
            res.failures.append((p, err))
    return res


def check_enumeration(max_n: int = 10, tol: float = 1e-8, **grid) -> CheckResult:
    """Enumeration objective vs value iteration at nu in {0, nu_n - 0.01, nu_n + 0.01}."""
    res = CheckResult("enumeration", True)
    for p in grid_params(range(1, max_n + 1), **grid):
        mdp = build_mdp(p)
        idx = compute_indices_adaptive_greedy(mdp).values
        totals = all_policy_totals(mdp)
        nus = {0.0}
        for v in idx:
            nus.update((float(v) - 0.01, float(v) + 0.01))
        for nu in sorted(nus):
            prob = NuProblem(mdp, nu)
            value, _ = solve_value_iteration(prob)
            for n in mdp.states:
                _, obj = enumerate_optimal_policy(prob, n, totals)
                err = abs(obj - float(value[n - 1]))
                res.worst = max(res.worst, err)
                if not err <= tol:
                    res.passed = False
                    res.failures.append((p, nu, n, err))
    return res


def check_indexability(max_n: int = 70, **grid) -> CheckResult:
    res = CheckResult("indexability", True)
    for p in grid_params(range(1, max_n + 1), **grid):
        if not compute_indices_adaptive_greedy(build_mdp(p)).indexable:
            res.passed = False
            res.failures.append(p)
    return res


def nonincreasing_violations(values, tol: float = CMP_TOL) -> list:
    """Index pairs (i, i+1) of ``values`` where the sequence rises by more than tol."""
    v = np.asarray(values)
    return [(int(i), int(i) + 1) for i in np.flatnonzero(v[1:] > v[:-1] + tol)]


def tooth_violations(values, period: int, tol: float = CMP_TOL) -> list:
    """Rising consecutive pairs within each residue class, as 1-based state pairs."""
    out = []
    for r in range(period):
        states = np.arange(r + 1, len(values) + 1, period)
        for i, j in nonincreasing_violations(np.asarray(values)[states - 1], tol):
            out.append((int(states[i]), int(states[j])))
    return sorted(out)


def index_shape_checks(max_window: int = 70, alpha: float = 1.0, beta: float = 0.9999) -> dict:
    """Literal shape properties of the base-instance index curves, name -> (passed, detail)."""
    def vals(gamma, a=alpha):
        return compute_indices_adaptive_greedy(build_mdp(FlowParams(max_window, gamma, a, beta))).values

    out = {}
    half = vals(0.5)
    out["gamma=1/2 non-monotone"] = (bool(nonincreasing_violations(half)), "")
    even = nonincreasing_violations(half[1::2])
    odd = nonincreasing_violations(half[0::2])
    out["gamma=1/2 even states nonincreasing"] = (not even, [(2 * i + 2, 2 * j + 2) for i, j in even])
    out["gamma=1/2 odd states nonincreasing"] = (not odd, [(2 * i + 1, 2 * j + 1) for i, j in odd])
    two3 = vals(2 / 3)
    bad3 = tooth_violations(two3, 3)
    out["gamma=2/3 period-3 teeth"] = (bool(nonincreasing_violations(two3)) and not bad3, bad3)
    for g in (0.0, 0.99):
        bad = nonincreasing_violations(vals(g))
        out[f"gamma={g} monotone"] = (not bad, [(i + 1, j + 1) for i, j in bad])
    ones = vals(0.5, a=0.0)
    out["alpha=0 all ones"] = (bool(np.all(np.abs(ones - 1.0) <= CMP_TOL)), float(np.max(np.abs(ones - 1))))
    return out


def find_nonthreshold_instance(betas=(0.9, 0.99, 0.999, 0.9999), gammas=(2 / 3, 0.7, 0.8, 0.9),
                               alphas=(1.0, 1.5, 2.0)):
    """First N=3 instance with nu_1 > nu_3 > nu_2, with a cost that makes {1, 3} optimal.

    Returns ``(params, indices, nu, admit_set)`` or None.
    """
    for b, g, a in itertools.product(betas, gammas, alphas):
        p = FlowParams(3, g, a, b)
        mdp = build_mdp(p)
        v = compute_indices_adaptive_greedy(mdp).values
        if not v[0] > v[2] > v[1]:
            continue
        nu = 0.5 * (v[1] + v[2])
        _, admit = solve_value_iteration(NuProblem(mdp, nu))
        if not admit.is_threshold():
            return p, v, nu, admit
    return None
