"""Command-line entry point: plan, fit, indicator, simulate, report (and synth for demos)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from typing import List, Optional

from .core import (DEFAULT_BITS, DEFAULT_LINK_BW, FORMAT_VERSION, BitwidthSet, ConfigError,
                   PlannerInputs, PlanningError, Workload, cluster_from_counts, model_preset,
                   parse_config, parse_plan, serialize_config, serialize_plan)
from .indicator import (IndicatorTable, QuantizerSpec, build_indicator_table, parse_stats_csv,
                        stats_to_csv)
from .latcost import LatencyModel, fit, ingest_profile, samples_to_csv
from .memcost import shard_mem_bytes
from .optimizer import InfeasiblePlanError, group_layers
from .optimizer.baselines import pipeedge_plan, uniform_plan
from .optimizer.milp import export_lp
from .optimizer.search import PlannerOptions, best_plan
from .pipesim import analytic_latency, simulate_plan, throughput

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_TIME_LIMIT = 4

log = logging.getLogger("pqplan")


class UsageError(ConfigError):
    pass


def _read(path: str, flag: str) -> str:
    if not path:
        raise UsageError(f"{flag} is required")
    if not os.path.exists(path):
        raise UsageError(f"{flag}: file not found: {path}")
    with open(path) as fh:
        return fh.read()


def _write(path: str, text: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _emit(path: Optional[str], text: str) -> None:
    if path:
        _write(path, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# input assembly

def _add_input_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model, cluster and workload")
    g.add_argument("--config", help="JSON config with model, cluster, workload and bits")
    g.add_argument("--model-name", help="model family, e.g. opt or bloom")
    g.add_argument("--model-size", help="model size, e.g. 30b")
    g.add_argument("--device-names", nargs="+", help="device types, e.g. T4-16G V100-32G")
    g.add_argument("--device-numbers", nargs="+", type=int, help="count per device type")
    g.add_argument("--link-bandwidth", type=float, default=DEFAULT_LINK_BW,
                   help="inter-device bandwidth in bytes/s")
    g.add_argument("--global-bz", type=int, default=32, help="global batch size B")
    g.add_argument("--s", type=int, default=512, help="prompt length")
    g.add_argument("--n", type=int, default=100, help="tokens to generate")
    g.add_argument("--bits", nargs="+", type=int, default=list(DEFAULT_BITS),
                   help="candidate bitwidths")


def _inputs(args) -> PlannerInputs:
    if args.config:
        return parse_config(_read(args.config, "--config"))
    if not args.model_name or not args.model_size:
        raise UsageError("give --config or both --model-name and --model-size")
    if not args.device_names:
        raise UsageError("give --config or --device-names")
    counts = args.device_numbers or [1] * len(args.device_names)
    if len(counts) != len(args.device_names):
        raise UsageError("--device-numbers must have one count per --device-names entry")
    model = model_preset(f"{args.model_name}-{args.model_size}")
    cluster = cluster_from_counts(args.device_names, counts, args.link_bandwidth)
    return PlannerInputs(model, cluster, Workload(args.global_bz, args.s, args.n),
                         BitwidthSet(tuple(sorted(set(args.bits)))))


def _latency(args) -> LatencyModel:
    if getattr(args, "fit", None):
        return fit(ingest_profile(_read(args.fit, "--fit")))
    if not args.use_profiled:
        raise UsageError("one of --fit or --use-profiled is required")
    return LatencyModel.from_json(_read(args.use_profiled, "--use-profiled"))


# ---------------------------------------------------------------------------
# subcommands

def _plan_report(name: str, plan, inputs: PlannerInputs, latency: LatencyModel) -> List[str]:
    sim, costs = simulate_plan(plan, inputs.model, inputs.cluster, inputs.workload, latency)
    w = inputs.workload
    analytic = analytic_latency(costs, w.global_batch, plan.eta, plan.xi, w.gen_len)
    obj = plan.objective
    lines = [f"[{name}] status={plan.status} eta={plan.eta} xi={plan.xi}"]
    if obj is not None:
        lines.append(f"  objective {obj.total:.6g} = latency {obj.latency:.6g} "
                     f"+ theta {obj.theta:.6g} x omega {obj.omega_sum:.6g}")
        lines.append(f"  T_max pre/dec {obj.t_max_pre:.6g}/{obj.t_max_dec:.6g} s, "
                     f"bubbles pre/dec {obj.pre_bubbles}/{obj.dec_bubbles}")
    lines.append(f"  analytic latency {analytic:.6g} s, simulated {sim.makespan:.6g} s "
                 f"(gap {sim.makespan - analytic:+.6g} s), throughput "
                 f"{throughput(w, sim.makespan):.6g} tok/s")
    for j, dev_idx in enumerate(plan.device_order):
        dev = inputs.cluster.devices[dev_idx]
        start, end = plan.partition[j]
        mem = shard_mem_bytes(inputs.model, plan.stage_bits(j), w, j == 0, plan.eta, plan.xi)
        bits = ",".join(str(b) for b in plan.stage_bits(j))
        lines.append(f"  stage {j} {dev.name}#{dev_idx} layers [{start},{end}) bits {bits} "
                     f"mem {mem.total / 2**30:.2f}/{dev.mem_capacity / 2**30:.2f} GiB "
                     f"(headroom {(dev.mem_capacity - mem.total) / 2**30:.2f})")
    return lines


def cmd_plan(args) -> int:
    inputs = _inputs(args)
    latency = _latency(args)
    omega = IndicatorTable.from_csv(_read(args.omega_file, "--omega-file"))
    options = PlannerOptions(theta=args.theta, group=args.group, heuristic=args.heuristic,
                             time_limit_s=args.time_limit_s, ordering_cap=args.ordering_cap,
                             backend=args.backend, bits=inputs.bits.bits)
    result = best_plan(inputs.model, inputs.cluster, inputs.workload, omega, latency, options)
    plan = result.plan
    _emit(args.output, serialize_plan(plan, inputs))
    if args.export_lp:
        _write(args.export_lp, export_lp(group_layers(result.instance, args.group)))
    lines = _plan_report("plan", plan, inputs, latency)
    plans = {"plan": plan}
    if args.compare_baselines:
        base_opts = PlannerOptions(time_limit_s=args.time_limit_s, ordering_cap=args.ordering_cap,
                                   backend=args.backend, bits=inputs.bits.bits)
        for name, builder in (("uniform", uniform_plan), ("pipeedge", pipeedge_plan)):
            try:
                plans[name] = builder(inputs.model, inputs.cluster, inputs.workload, omega,
                                      latency, base_opts)
                lines += _plan_report(name, plans[name], inputs, latency)
            except InfeasiblePlanError as exc:
                lines.append(f"[{name}] infeasible: {exc}")
    if args.report_dir:
        from .report import write_report
        write_report(args.report_dir, plans, inputs, latency)
    out = sys.stderr if args.output is None else sys.stdout
    out.write("\n".join(lines) + "\n")
    return EXIT_TIME_LIMIT if plan.status == "time_limit" else EXIT_OK


def cmd_fit(args) -> int:
    model = fit(ingest_profile(_read(args.profile, "--profile")))
    _emit(args.output, model.to_json() + "\n")
    return EXIT_OK


def cmd_indicator(args) -> int:
    stats = parse_stats_csv(_read(args.stats, "--stats"))
    table = build_indicator_table(stats, tuple(sorted(set(args.bits))),
                                  QuantizerSpec(args.scheme, args.rounding))
    _emit(args.output, table.to_csv())
    return EXIT_OK


def _load_plan(args):
    plan, inputs = parse_plan(_read(args.plan, "--plan"))
    if inputs is None:
        raise UsageError("plan document carries no inputs section")
    return plan, inputs


def cmd_simulate(args) -> int:
    plan, inputs = _load_plan(args)
    latency = _latency(args)
    sim, costs = simulate_plan(plan, inputs.model, inputs.cluster, inputs.workload, latency,
                               args.linear_decode)
    w = inputs.workload
    doc = {
        "format_version": FORMAT_VERSION,
        **sim.to_dict(),
        "analytic_latency": analytic_latency(costs, w.global_batch, plan.eta, plan.xi, w.gen_len),
        "throughput": throughput(w, sim.makespan),
        "stage_costs": {"pre": list(costs.pre), "dec": list(costs.dec),
                        "comm_pre": list(costs.comm_pre), "comm_dec": list(costs.comm_dec)},
    }
    _emit(args.output, json.dumps(doc, indent=2) + "\n")
    if args.timeline:
        _write(args.timeline, sim.timeline_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report
    plan, inputs = _load_plan(args)
    latency = _latency(args)
    plans = {"plan": plan}
    for spec in args.baseline or []:
        if "=" not in spec:
            raise UsageError("--baseline takes NAME=PLAN_FILE")
        name, path = spec.split("=", 1)
        other, _ = parse_plan(_read(path, "--baseline"))
        plans[name] = other
    for path in write_report(args.out_dir, plans, inputs, latency, args.linear_decode):
        print(path)
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write a synthetic config, profile and calibration stats for desk-scale runs."""
    from .synthetic import synthetic_layer_stats, synthetic_samples
    inputs = _inputs(args)
    names = sorted({d.name for d in inputs.cluster.devices})
    os.makedirs(args.out_dir, exist_ok=True)
    samples = synthetic_samples(inputs.model, names, inputs.bits.bits, noise=args.noise,
                                seed=args.seed)
    _write(os.path.join(args.out_dir, "config.json"), serialize_config(inputs) + "\n")
    _write(os.path.join(args.out_dir, "profile.csv"), samples_to_csv(samples))
    _write(os.path.join(args.out_dir, "stats.csv"),
           stats_to_csv(synthetic_layer_stats(inputs.model, seed=args.seed)))
    for name in ("config.json", "profile.csv", "stats.csv"):
        print(os.path.join(args.out_dir, name))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqplan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="search for the best execution plan")
    _add_input_flags(p)
    lat = p.add_mutually_exclusive_group()
    lat.add_argument("--fit", metavar="PROFILE_CSV", help="fit latency models from a profile")
    lat.add_argument("--use-profiled", metavar="MODEL_JSON", help="use a fitted latency model")
    p.add_argument("--omega-file", help="indicator table CSV (layer,<bit>,...)")
    p.add_argument("--theta", type=float, default=1.0, help="weight of the indicator term")
    p.add_argument("--group", type=int, default=1, help="layers per decision group")
    p.add_argument("--heuristic", action="store_true", help="adabits + bitwidth transfer")
    p.add_argument("--time-limit-s", type=float, default=60.0, help="per-subproblem limit")
    p.add_argument("--ordering-cap", type=int, default=None)
    p.add_argument("--backend", choices=("bnb", "highs"), default="bnb")
    p.add_argument("--compare-baselines", action="store_true")
    p.add_argument("--export-lp", metavar="PATH", help="write the winning subproblem as LP")
    p.add_argument("--report-dir", help="also write CSV tables and figures here")
    p.add_argument("--output", "-o", help="plan JSON (stdout if omitted)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("fit", help="fit latency models from a profile CSV")
    p.add_argument("--profile", required=True)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("indicator", help="build the indicator table from calibration stats")
    p.add_argument("--stats", required=True)
    p.add_argument("--bits", nargs="+", type=int, default=list(DEFAULT_BITS))
    p.add_argument("--scheme", choices=("symmetric", "asymmetric"), default="symmetric")
    p.add_argument("--rounding", choices=("deterministic", "stochastic"), default="deterministic")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_indicator)

    for name, func, hlp in (("simulate", cmd_simulate, "simulate a plan"),
                            ("report", cmd_report, "write tables and figures for a plan")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--plan", required=True)
        p.add_argument("--use-profiled", "--latency-model", dest="use_profiled", required=True,
                       metavar="MODEL_JSON")
        p.add_argument("--linear-decode", action="store_true",
                       help="decode cost linear in the token index")
        if name == "simulate":
            p.add_argument("--timeline", help="per-stage timeline CSV")
            p.add_argument("--output", "-o")
        else:
            p.add_argument("--baseline", action="append", metavar="NAME=PLAN_FILE")
            p.add_argument("--out-dir", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="generate synthetic inputs for desk-scale runs")
    _add_input_flags(p)
    p.add_argument("--noise", type=float, default=0.0, help="multiplicative latency noise std")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def _provenance(exc: BaseException) -> str:
    """Innermost package module the exception passed through."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    where = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = os.path.abspath(frame.filename)
        if path.startswith(pkg_dir + os.sep):
            rel = os.path.relpath(path, pkg_dir)
            where = rel[:-3].replace(os.sep, ".") if rel.endswith(".py") else rel
    return where.split(".")[0]


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=max(logging.WARNING - 10 * args.verbose, logging.DEBUG),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "group", 1) < 1:
        parser.error("--group must be >= 1")
    if getattr(args, "theta", 0.0) < 0:
        parser.error("--theta must be >= 0")
    try:
        return args.func(args)
    except InfeasiblePlanError as exc:
        print(f"error [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (PlanningError, ValueError, OSError) as exc:
        print(f"error [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
