"""Reference plans built in the same framework: Uniform and PipeEdge-style."""

from __future__ import annotations

from ..core import ClusterSpec, ModelSpec, Plan, Workload
from ..indicator import IndicatorTable
from ..latcost import LatencyModel
from ..pipesim import simulate_plan
from .bnb import SolverOptions, solve_ilp
from .instance import InfeasiblePlanError, build_instance, ceil_div, evaluate
from .search import PlannerOptions, enumerate_orderings, enumerate_microbatch_pairs


def even_partition(L: int, N: int) -> tuple:
    if N > L:
        raise InfeasiblePlanError(f"{N} stages cannot each hold a layer of a {L}-layer model")
    sizes = [L // N + (1 if j < L % N else 0) for j in range(N)]
    out, start = [], 0
    for size in sizes:
        out.append((start, start + size))
        start += size
    return tuple(out)


def uniform_plan(model: ModelSpec, cluster: ClusterSpec, workload: Workload,
                 indicator: IndicatorTable, latency: LatencyModel,
                 options: PlannerOptions = PlannerOptions()) -> Plan:
    """Even partition in cluster order, one precision for every layer.

    The precision is the highest that fits every stage; among equal micro-batch
    sizes (eta = xi) the one with the smallest simulated makespan is kept.
    """
    N, L = len(cluster), model.num_layers
    order = tuple(range(N))
    stages = even_partition(L, N)
    xis = sorted({xi for _, xi in enumerate_microbatch_pairs(workload.global_batch, N)})
    best = None
    for xi in xis:
        inst = build_instance(model, cluster, order, workload, options.bits, latency, indicator,
                              0.0, xi, xi, options.tmp_alpha, options.bit_kv)
        for b in sorted(options.bits, reverse=True):
            cand = evaluate(inst, stages, (b,) * L)
            if not cand.feasible:
                continue
            plan = Plan(order, stages, (b,) * L, xi, xi, cand.objective, "baseline")
            makespan = simulate_plan(plan, model, cluster, workload, latency)[0].makespan
            if best is None or makespan < best[0]:
                best = (makespan, plan)
            break
    if best is None:
        raise InfeasiblePlanError("no single precision fits an even partition")
    return best[1]


def pipeedge_plan(model: ModelSpec, cluster: ClusterSpec, workload: Workload,
                  indicator: IndicatorTable, latency: LatencyModel,
                  options: PlannerOptions = PlannerOptions()) -> Plan:
    """Latency-optimal heterogeneous partition at the highest single precision that fits."""
    N = len(cluster)
    mb = ceil_div(workload.global_batch, N)
    solver = SolverOptions(time_limit_s=options.time_limit_s, backend=options.backend)
    for b in sorted(options.bits, reverse=True):
        best = None
        for order in enumerate_orderings(cluster, options.ordering_cap):
            inst = build_instance(model, cluster, order, workload, (b,), latency, indicator,
                                  0.0, mb, mb, options.tmp_alpha, options.bit_kv)
            try:
                cand = solve_ilp(inst, solver)
            except InfeasiblePlanError:
                continue
            if best is None or cand.objective.total < best[0].objective.total:
                best = (cand, order)
        if best is not None:
            cand, order = best
            return Plan(tuple(order), cand.stages, cand.bits, mb, mb, cand.objective, "baseline")
    raise InfeasiblePlanError("no single precision fits any partition")
