"""Acceptance criteria, one PASS/FAIL line each (shown in the terminal summary)."""
import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from txindex.config import load_scenario
from txindex.flow_model import FlowParams
from txindex.packet_sim import run_scenario
from txindex.slotted_heuristic import MultiFlowSystem, evaluate_discounted_run, joint_optimal_small
from txindex.verify import (check_bisection, check_closed_form, check_enumeration, check_indexability,
                            find_nonthreshold_instance, index_shape_checks)

RED_SEEDS = range(1, 6)


def report(criterion, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def timed(fn, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t


def test_c1_closed_form_agreement():
    res, dt = timed(check_closed_form, tol=1e-8)
    report("1 closed-form agreement", res.passed and dt < 1.0,
           f"worst={res.worst:.2e} (tol 1e-8), {dt:.2f}s (limit 1s)")


@pytest.mark.slow
def test_c2_oracle_equivalence():
    t = time.perf_counter()
    bis = check_bisection(max_n=10, tol=1e-6)
    enum = check_enumeration(max_n=10, tol=1e-8)
    dt = time.perf_counter() - t
    report("2 oracle equivalence", bis.passed and enum.passed and dt < 60,
           f"bisection worst={bis.worst:.2e} (tol 1e-6), enumeration worst={enum.worst:.2e} "
           f"(tol 1e-8), {dt:.1f}s (limit 60s)")


@pytest.mark.slow
def test_c3_indexability_sweep():
    res, dt = timed(check_indexability, max_n=70)
    report("3 indexability sweep N<=70", res.passed and dt < 300,
           f"{len(res.failures)} non-indexable instances, {dt:.1f}s (limit 300s)")


SHAPES = index_shape_checks()


@pytest.mark.parametrize("name", list(SHAPES))
def test_c4_index_shape(name):
    passed, detail = SHAPES[name]
    if isinstance(detail, list) and len(detail) > 6:
        detail = f"{len(detail)} rising pairs, {detail[0]} .. {detail[-1]}"
    report(f"4 index shape, {name}", passed, "ok" if passed else f"violations {detail}")


def test_c5_nonthreshold_regime():
    found = find_nonthreshold_instance()
    if found is None:
        report("5 non-threshold regime", False, "no instance found")
    p, v, nu, admit = found
    ok = p.max_window == 3 and p.gamma >= 2 / 3 and p.alpha >= 1 and v[0] > v[2] > v[1] \
        and not admit.is_threshold()
    report("5 non-threshold regime", ok,
           f"gamma={p.gamma:.4f} alpha={p.alpha} beta={p.beta}, nu=({v[0]:.5f}, {v[1]:.5f}, {v[2]:.5f}), "
           f"admit {sorted(admit.admit)} at nu={nu:.5f}")


def test_c6_slotted_near_optimality():
    params = [FlowParams(3, 0.5, 1.0, 0.9)] * 2
    base = MultiFlowSystem.from_params(params, buffer_capacity=3)
    worst = (0.0, None)
    for start in itertools.product((1, 2, 3), repeat=2):
        sys_ = base.copy()
        sys_.states = list(start)
        heur, _ = evaluate_discounted_run(sys_)
        opt = joint_optimal_small(sys_)
        gap = (opt - heur) / opt
        worst = max(worst, (gap, start))
    report("6 slotted heuristic within 5% (K=2 N=3 B=3 gamma=0.5 beta=0.9)", worst[0] <= 0.05,
           f"worst gap {worst[0]:.2%} from start {worst[1]}")


# -- packet simulation --

def _mean(reports, attr):
    return float(np.mean([getattr(r, attr) for r in reports]))


@pytest.fixture(scope="module")
def sim():
    """scenario -> policy -> list of (report, bundle, spec, wall seconds)."""
    out = {}
    for i in range(5):
        name = f"scenario{i}"
        out[name] = {}
        for pol in ("droptail", "red", "index"):
            seeds = RED_SEEDS if pol == "red" else [1]
            runs = []
            for s in seeds:
                spec = load_scenario(name, pol).with_policy(pol, seed=s)
                (rep, bundle), dt = timed(run_scenario, spec)
                runs.append((rep, bundle, spec, dt))
            out[name][pol] = runs
    return out


def _metric(sim, scen, pol, attr):
    return _mean([r[0] for r in sim[scen][pol]], attr)


def test_c7_s0_droptail_correlation(sim):
    c = _metric(sim, "scenario0", "droptail", "cwnd_correlation")
    report("7 S0 DropTail cwnd correlation > 0.8", c > 0.8, f"{c:.3f}")


def test_c7_s0_index_correlation(sim):
    c = _metric(sim, "scenario0", "index", "cwnd_correlation")
    report("7 S0 Index cwnd correlation < 0", c < 0, f"{c:.3f}")


def test_c7_s0_utilization(sim):
    u_i = _metric(sim, "scenario0", "index", "utilization")
    u_d = _metric(sim, "scenario0", "droptail", "utilization")
    report("7 S0 Index util >= DropTail util - 0.5pp", u_i >= u_d - 0.005, f"index {u_i:.4f} droptail {u_d:.4f}")


def test_c7_s1_utilization(sim):
    u_i = _metric(sim, "scenario1", "index", "utilization")
    u_d = _metric(sim, "scenario1", "droptail", "utilization")
    report("7 S1 Index util >= DropTail util + 3pp", u_i >= u_d + 0.03, f"index {u_i:.4f} droptail {u_d:.4f}")


@pytest.mark.parametrize("scen,margin", [("scenario2", 0.08), ("scenario3", 0.08), ("scenario4", 0.05)])
def test_c7_fairness(sim, scen, margin):
    j_i = _metric(sim, scen, "index", "jain_fairness")
    j_d = _metric(sim, scen, "droptail", "jain_fairness")
    j_r = _metric(sim, scen, "red", "jain_fairness")
    report(f"7 S{scen[-1]} Index Jain >= DropTail Jain + {margin}", j_i >= j_d + margin,
           f"index {j_i:.4f} droptail {j_d:.4f} (red, {len(RED_SEEDS)} seeds: {j_r:.4f})")


def test_c7_wall_time(sim):
    worst = max(r[3] for scen in sim.values() for runs in scen.values() for r in runs)
    report("7 each 25 s scenario run < 10 s wall", worst < 10.0, f"slowest {worst:.2f}s")


def test_c8_simulator_invariants(sim):
    bad = []
    for scen, pols in sim.items():
        for pol, runs in pols.items():
            for rep, bundle, spec, _ in runs:
                c = bundle.counters
                if c["sent"] != c["delivered"] + c["dropped"] + c["in_network"]:
                    bad.append((scen, pol, spec.seed, "conservation"))
                if max(q for _, q in bundle.queue_changes) > spec.router.buffer_size:
                    bad.append((scen, pol, spec.seed, "queue > B"))
                if run_scenario(spec)[1].digest() != bundle.digest():
                    bad.append((scen, pol, spec.seed, "rerun differs"))
    n = sum(len(r) for p in sim.values() for r in p.values())
    report("8 simulator invariants on every run", not bad, f"{n} runs checked, violations {bad}")
