"""Command-line front end: index tables, scenario runs, verification sweeps, slotted demos."""
from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .config import POLICIES, ScenarioError, load_scenario
from .flow_model import FlowParams, InvalidParameterError, build_mdp
from .index_engine import compute_indices_adaptive_greedy, write_index_csv
from .mdp_oracle import ProblemSizeError
from .metrics import MetricsReport
from .packet_sim import run_scenario, write_trace_csv
from .slotted_heuristic import (HorizonError, MultiFlowSystem, evaluate_discounted_run,
                                is_overloaded, joint_optimal_small, run_trace, write_trace_csv as write_slot_csv)
from . import verify

EXIT_OK, EXIT_INVALID, EXIT_MISMATCH = 0, 1, 2
SYNC_THRESHOLD = 0.8


def _err(msg: str) -> None:
    print(f"txindex: {msg}", file=sys.stderr)


# -- indices -------------------------------------------------------------------

def cmd_indices(args) -> int:
    try:
        params = FlowParams(args.n, args.gamma, args.alpha, args.beta)
    except InvalidParameterError as exc:
        _err(str(exc))
        return EXIT_INVALID
    table = compute_indices_adaptive_greedy(build_mdp(params))
    if not table.indexable and not args.force:
        _err("indexability not confirmed for these parameters (use --force to write the table anyway)")
        return EXIT_INVALID
    if not table.monotone_nonincreasing:
        _err("warning: monotone_nonincreasing = false (index is not nonincreasing in the window)")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_index_csv(table, fh)
    else:
        write_index_csv(table, sys.stdout)
    return EXIT_OK


# -- simulate ------------------------------------------------------------------

def _mean_report(reports: list) -> MetricsReport:
    if len(reports) == 1:
        return reports[0]
    avg = lambda xs: float(np.mean(xs))
    return MetricsReport(
        utilization=avg([r.utilization for r in reports]),
        jain_fairness=avg([r.jain_fairness for r in reports]),
        mean_queue_size=avg([r.mean_queue_size for r in reports]),
        per_flow_rtt=list(np.mean([r.per_flow_rtt for r in reports], axis=0)),
        per_flow_goodput=list(np.mean([r.per_flow_goodput for r in reports], axis=0)),
        cwnd_correlation=avg([r.cwnd_correlation for r in reports]),
        probe_retransmits=int(sum(r.probe_retransmits for r in reports)),
        extras={"runs": len(reports)},
    )


def _pct(new: float, old: float) -> str:
    if not old or math.isnan(old) or math.isnan(new):
        return "n/a"
    return f"{100 * (new - old) / old:+.1f}%"


def run_policies(path, policies, overrides=(), seed=None, red_seeds=5):
    """Run each policy; RED is averaged over ``red_seeds`` consecutive seeds.

    Returns {policy: (report, first-seed trace bundle, spec)}.
    """
    out = {}
    for pol in policies:
        spec = load_scenario(path, pol, overrides)
        if seed is not None:
            spec = spec.with_policy(pol, seed)
        seeds = [spec.seed + i for i in range(red_seeds)] if pol == "red" else [spec.seed]
        reports = []
        bundle = None
        for s in seeds:
            rep, b = run_scenario(spec.with_policy(pol, s))
            reports.append(rep)
            bundle = bundle or b
        out[pol] = (_mean_report(reports), bundle, spec)
    return out


def cmd_simulate(args) -> int:
    policies = list(POLICIES) if args.policy == "all" else [args.policy]
    overrides = list(args.set or [])
    if args.buffer is not None:
        overrides.append(f"router.buffer_size={args.buffer}")
    if args.duration is not None:
        overrides.append(f"sim_duration_s={args.duration}")
    if args.warmup is not None:
        overrides.append(f"warmup_s={args.warmup}")
    try:
        results = run_policies(args.scenario, policies, overrides, args.seed, args.red_seeds)
    except (ScenarioError, InvalidParameterError, OSError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    K = len(next(iter(results.values()))[2].flows)
    name = next(iter(results.values()))[2].name
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "policy", "utilization", "jain", "mean_queue",
                    *[f"rtt_{k}" for k in range(1, K + 1)], *[f"goodput_{k}" for k in range(1, K + 1)],
                    "cwnd_correlation", "probe_retransmits", "runs"])
        for pol in policies:
            r = results[pol][0]
            w.writerow([name, pol, repr(r.utilization), repr(r.jain_fairness), repr(r.mean_queue_size),
                        *[repr(float(x)) for x in r.per_flow_rtt], *[repr(float(x)) for x in r.per_flow_goodput],
                        repr(r.cwnd_correlation), r.probe_retransmits, r.extras.get("runs", 1)])
    for pol in policies:
        with open(out_dir / f"trace_{pol}.csv", "w", newline="") as fh:
            write_trace_csv(results[pol][1], fh)

    print(f"{name}: metrics over [{results[policies[0]][2].warmup_s:g}, "
          f"{results[policies[0]][2].sim_duration_s:g}] s")
    hdr = f"{'policy':9s} {'util':>8s} {'jain':>7s} {'queue':>7s} {'corr':>7s}  rtt (ms)"
    print(hdr)
    for pol in policies:
        r = results[pol][0]
        rtts = " ".join(f"{1000 * x:.1f}" for x in r.per_flow_rtt)
        print(f"{pol:9s} {r.utilization:8.4f} {r.jain_fairness:7.4f} {r.mean_queue_size:7.2f} "
              f"{r.cwnd_correlation:7.3f}  {rtts}")
    if "index" in results:
        idx = results["index"][0]
        for base in ("droptail", "red"):
            if base in results:
                b = results[base][0]
                print(f"index vs {base}: util {_pct(idx.utilization, b.utilization)}, "
                      f"jain {_pct(idx.jain_fairness, b.jain_fairness)}, "
                      f"queue {_pct(idx.mean_queue_size, b.mean_queue_size)}")
    for pol in policies:
        c = results[pol][0].cwnd_correlation
        if not math.isnan(c):
            state = "synchronized" if c > SYNC_THRESHOLD else ("anti-phase" if c < 0 else "partially synchronized")
            print(f"{pol}: cwnd correlation {c:.3f} ({state})")
    return EXIT_OK


# -- verify --------------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.regime == "nonthreshold":
        found = verify.find_nonthreshold_instance()
        if found is None:
            print("no nu_1 > nu_3 > nu_2 instance found on the search grid")
            return EXIT_MISMATCH
        p, v, nu, admit = found
        print(f"N=3 gamma={p.gamma:.6g} alpha={p.alpha:g} beta={p.beta:g}")
        print(f"  nu_1={v[0]:.9f} > nu_3={v[2]:.9f} > nu_2={v[1]:.9f}")
        print(f"  at nu={nu:.9f} the optimal admit set is {sorted(admit.admit)} (non-threshold)")
        return EXIT_OK
    if args.closed_form_only:
        res = verify.check_closed_form()
        print(f"{'N':>2s} {'alpha':>5s} {'beta':>7s} {'gamma':>7s}  {'max |AG - closed form|':>22s}")
        for p, _, _, err in res.rows:
            print(f"{p.max_window:2d} {p.alpha:5g} {p.beta:7g} {p.gamma:7.4f}  {err:22.3e}")
        print(f"closed-form: {'PASS' if res.passed else 'FAIL'} (worst {res.worst:.3e})")
        return EXIT_OK if res.passed else EXIT_MISMATCH
    checks = [verify.check_closed_form(),
              verify.check_bisection(args.max_n),
              verify.check_enumeration(args.max_n),
              verify.check_indexability(args.sweep_n)]
    ok = True
    for res in checks:
        ok &= res.passed
        print(f"{res.name:13s} {'PASS' if res.passed else 'FAIL'}  worst={res.worst:.3e}  failures={len(res.failures)}")
        for f in res.failures[:10]:
            print(f"    {f}")
    if args.shapes:
        for name, (passed, detail) in verify.index_shape_checks().items():
            ok &= passed
            print(f"{name:40s} {'PASS' if passed else 'FAIL'}  {detail if not passed else ''}")
    return EXIT_OK if ok else EXIT_MISMATCH


# -- slotted -------------------------------------------------------------------

def cmd_slotted(args) -> int:
    try:
        params = [FlowParams(args.n, g, args.alpha, args.beta) for g in args.gamma]
        if len(params) == 1 and args.flows > 1:
            params = params * args.flows
        system = MultiFlowSystem.from_params(params, args.buffer, args.target)
        if args.start:
            if len(args.start) != len(params):
                raise InvalidParameterError("--start needs one state per flow")
            system = MultiFlowSystem(system.flows, list(args.start), system.buffer_capacity,
                                     system.target_throughput)
        heur, work = evaluate_discounted_run(system, "heuristic")
    except (InvalidParameterError, ValueError, HorizonError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    print(f"K={system.n_flows} N={args.n} B={args.buffer} beta={args.beta:g} start={system.states}")
    print(f"heuristic discounted reward {heur:.6f}, work {work:.6f}")
    print(f"overloaded (always-admit work > target/(1-beta)): {is_overloaded(system)}")
    try:
        opt = joint_optimal_small(system)
        print(f"joint optimum {opt:.6f}, gap {(opt - heur) / opt:.2%}" if opt else f"joint optimum {opt}")
    except ProblemSizeError as exc:
        print(f"joint optimum skipped: {exc}")
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            write_slot_csv(run_trace(system, args.steps), system.n_flows, fh)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures; exit code 2 is reserved for mismatches
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="txindex", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("indices", help="compute a flow's transmission-index table")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.9999)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--n", type=int, default=70, help="maximum window N")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--force", action="store_true", help="write the table even if indexability fails")
    p.set_defaults(func=cmd_indices)

    p = sub.add_parser("simulate", help="run a packet-level scenario")
    p.add_argument("scenario", help="scenario TOML file or bundled name (scenario0..scenario4)")
    p.add_argument("--policy", choices=[*POLICIES, "all"], default="all")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--seed", type=int)
    p.add_argument("--red-seeds", type=int, default=5, help="RED runs averaged over this many seeds")
    p.add_argument("--buffer", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any scenario field, e.g. flows.0.gamma=0.9 (repeatable)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="cross-check indices against the oracles")
    p.add_argument("--max-n", type=int, default=10, help="largest N for oracle cross-checks")
    p.add_argument("--sweep-n", type=int, default=70, help="largest N for the indexability sweep")
    p.add_argument("--closed-form-only", action="store_true")
    p.add_argument("--n", type=int, default=3, help="window cap for --regime (only 3 is supported)")
    p.add_argument("--regime", choices=["nonthreshold"])
    p.add_argument("--shapes", action="store_true", help="also run the index-shape property checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("slotted", help="RTT-slotted multi-flow heuristic demo")
    p.add_argument("--flows", type=int, default=2)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--gamma", type=float, nargs="+", default=[0.5])
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--buffer", type=int, default=3)
    p.add_argument("--target", type=float)
    p.add_argument("--start", type=int, nargs="+")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--trace", help="write the slot trace CSV here")
    p.set_defaults(func=cmd_slotted)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "regime", None) and args.n != 3:
        _err("--regime nonthreshold is defined for --n 3")
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
