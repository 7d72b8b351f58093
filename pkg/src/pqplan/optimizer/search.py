"""Outer plan search over device orderings and micro-batch sizes."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from math import inf
from typing import List, Optional, Tuple

from ..core import DEFAULT_BITS, ClusterSpec, ModelSpec, Plan, Workload
from ..indicator import IndicatorTable
from ..latcost import LatencyModel
from ..memcost import DEFAULT_TMP_ALPHA
from .bnb import SolverOptions, _Search, solve_ilp
from .heuristic import adabits, bitwidth_transfer
from .instance import (IlpInstance, InfeasiblePlanError, PlanCandidate, build_instance, ceil_div,
                       evaluate, expand_candidate, group_layers)

log = logging.getLogger(__name__)


def enumerate_orderings(cluster: ClusterSpec, cap: Optional[int] = None) -> List[tuple]:
    """Distinct orderings of the devices, identical devices deduplicated.

    Each ordering is a tuple of device indices; among identical devices the lower
    index always comes first. Orderings are sorted by their sequence of device kinds.
    """
    kinds = [d.kind for d in cluster.devices]
    distinct = sorted(set(kinds))
    pools = {k: [i for i, x in enumerate(kinds) if x == k] for k in distinct}
    remaining = {k: len(v) for k, v in pools.items()}
    out: List[tuple] = []
    seq: List = []

    def rec():
        if cap is not None and len(out) >= cap:
            return
        if len(seq) == len(kinds):
            used = {k: 0 for k in distinct}
            order = []
            for k in seq:
                order.append(pools[k][used[k]])
                used[k] += 1
            out.append(tuple(order))
            return
        for k in distinct:
            if remaining[k]:
                remaining[k] -= 1
                seq.append(k)
                rec()
                seq.pop()
                remaining[k] += 1

    rec()
    return out


def enumerate_microbatch_pairs(B: int, N: int) -> List[Tuple[int, int]]:
    if B < 1 or N < 1:
        raise ValueError("B and N must be >= 1")
    even = ceil_div(B, N)
    xis = sorted({even} | {d for d in range(even, B + 1) if B % d == 0})
    return [(eta, xi) for xi in xis for eta in range(1, xi + 1)]


@dataclass(frozen=True)
class PlannerOptions:
    theta: float = 1.0
    group: int = 1
    heuristic: bool = False
    time_limit_s: float = 60.0
    ordering_cap: Optional[int] = None
    backend: str = "bnb"
    bits: tuple = DEFAULT_BITS
    tmp_alpha: float = DEFAULT_TMP_ALPHA
    bit_kv: int = 16
    microbatch_pairs: Optional[tuple] = None

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if self.group < 1:
            raise ValueError("group size must be >= 1")
        if self.time_limit_s <= 0:
            raise ValueError("time limit must be positive")


@dataclass(frozen=True)
class SearchResult:
    plan: Plan
    candidate: PlanCandidate        # per-layer candidate on ``instance``
    instance: IlpInstance           # ungrouped instance of the winning subproblem
    subproblems: int
    timed_out: int
    elapsed_s: float


def _root_bound(inst: IlpInstance) -> float:
    search = _Search(inst, None, inf, 0.0)
    if search.N > search.L:
        return inf
    return search.bound(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _wins(cand: PlanCandidate, key: tuple, best: Optional[tuple], rel_tol: float = 1e-9) -> bool:
    """Deterministic fold: objective, then larger bit sum, then (ordering index, eta, xi)."""
    if best is None:
        return True
    bcand, bkey = best[0], best[1]
    x, y = cand.objective.total, bcand.objective.total
    tol = rel_tol * max(1.0, abs(x), abs(y))
    if x < y - tol:
        return True
    if x > y + tol:
        return False
    if cand.bit_sum != bcand.bit_sum:
        return cand.bit_sum > bcand.bit_sum
    return key < bkey


def best_plan(model: ModelSpec, cluster: ClusterSpec, workload: Workload, indicator: IndicatorTable,
              latency: LatencyModel, options: PlannerOptions = PlannerOptions()) -> SearchResult:
    start = time.monotonic()
    orderings = enumerate_orderings(cluster, options.ordering_cap)
    N = len(cluster)
    pairs = (list(options.microbatch_pairs) if options.microbatch_pairs is not None
             else enumerate_microbatch_pairs(workload.global_batch, N))
    bits = tuple(sorted(options.bits))

    subs = []
    for oi, order in enumerate(orderings):
        for eta, xi in pairs:
            inst = build_instance(model, cluster, order, workload, bits, latency, indicator,
                                  options.theta, eta, xi, options.tmp_alpha, options.bit_kv)
            grouped = group_layers(inst, options.group)
            lb = _root_bound(grouped) if not options.heuristic else 0.0
            subs.append((lb, (oi, eta, xi), order, inst, grouped))
    subs.sort(key=lambda x: (x[0], x[1]))

    solver = SolverOptions(time_limit_s=options.time_limit_s, backend=options.backend)
    best = None  # (candidate on ungrouped instance, key, order, instance)
    timed_out = 0
    for lb, key, order, inst, grouped in subs:
        if lb == inf:
            continue
        if best is not None and not options.heuristic:
            incumbent = best[0].objective.total
            if lb > incumbent * (1 + 1e-9) + 1e-12:
                continue
        try:
            if options.heuristic:
                cand = bitwidth_transfer(grouped, adabits(grouped))
            else:
                cutoff = None if best is None else best[0].objective.total * (1 + 1e-9) + 1e-12
                cand = solve_ilp(grouped, solver, cutoff)
                if cand is None:
                    continue
        except InfeasiblePlanError:
            continue
        if not cand.optimal and not options.heuristic:
            timed_out += 1
        stages, layer_bits = expand_candidate(grouped, cand)
        full = evaluate(inst, stages, layer_bits, optimal=cand.optimal, nodes=cand.nodes)
        if _wins(full, key, None if best is None else (best[0], best[1])):
            best = (full, key, order, inst)
    if best is None:
        raise InfeasiblePlanError("no feasible plan for any device ordering and micro-batch size")
    full, key, order, inst = best
    if options.heuristic:
        status = "heuristic"
    elif timed_out:
        status = "time_limit"
    else:
        status = "optimal"
    plan = Plan(device_order=tuple(order), partition=full.stages, bits=full.bits,
                eta=key[1], xi=key[2], objective=full.objective, status=status)
    elapsed = time.monotonic() - start
    log.info("searched %d subproblems in %.2fs (%d hit the time limit)", len(subs), elapsed, timed_out)
    return SearchResult(plan, full, inst, len(subs), timed_out, elapsed)
