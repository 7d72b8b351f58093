"""Quality-first start point (adabits) and the bitwidth-transfer local search."""

from __future__ import annotations

import logging
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .instance import IlpInstance, InfeasiblePlanError, PlanCandidate, evaluate, stage_times

log = logging.getLogger(__name__)

# (b_st, b_pi) pairs; nums follows memory equivalence, e.g. one 8-bit layer ~ two 4-bit layers
DEFAULT_RULE_PAIRS = ((3, 4), (4, 8), (3, 8), (4, 16), (8, 16))

_BIG = 1e30


def default_rules(bits: Sequence[int]) -> Tuple[Tuple[int, int, int], ...]:
    present = set(bits)
    return tuple((lo, hi, max(1, hi // lo)) for lo, hi in DEFAULT_RULE_PAIRS
                 if lo in present and hi in present)


def _ideal_stage(inst: IlpInstance) -> List[int]:
    """Stage each layer would sit on under a budget-proportional split."""
    L, N = inst.num_layers, inst.num_devices
    share = np.maximum(inst.budget.astype(float), 0.0)
    if share.sum() <= 0:
        share = np.ones(N)
    cum = np.cumsum(share) / share.sum()
    return [int(min(np.searchsorted(cum, (i + 0.5) / L), N - 1)) for i in range(L)]


def adabits(inst: IlpInstance) -> PlanCandidate:
    """Minimum total indicator subject only to memory, support and contiguity.

    Exact forward DP with Pareto labels (stage memory, cost) where cost is
    lexicographic: indicator sum, then larger bit sum, then distance from a
    budget-proportional partition (so ties do not produce lopsided stages).
    """
    L, N, K = inst.lat_pre.shape
    if N > L:
        raise InfeasiblePlanError(f"{N} stages cannot each hold a layer of a {L}-layer model")
    allowed = inst.allowed
    ideal = _ideal_stage(inst)
    mem = inst.mem
    om = inst.omega
    budget = [int(x) for x in inst.budget]

    # label: (mem_cur, omega, -bits, penalty, parent, (j, k))
    fronts: Dict[int, list] = {}
    for k in range(K):
        if allowed[0, k] and mem[0, k] <= budget[0]:
            fronts.setdefault(0, []).append(
                (int(mem[0, k]), float(om[0, k]), -inst.bits[k], abs(0 - ideal[0]), None, (0, k)))
    fronts = {j: _pareto(f) for j, f in fronts.items()}
    for i in range(1, L):
        nxt: Dict[int, list] = {}
        for j, labels in fronts.items():
            for jj in (j, j + 1):
                if jj >= N or L - 1 - i < N - 1 - jj:
                    continue
                for lab in labels:
                    base = lab[0] if jj == j else 0
                    for k in range(K):
                        if not allowed[jj, k]:
                            continue
                        m = base + int(mem[i, k])
                        if m > budget[jj]:
                            continue
                        nxt.setdefault(jj, []).append(
                            (m, lab[1] + float(om[i, k]), lab[2] - inst.bits[k],
                             lab[3] + abs(jj - ideal[i]), lab, (jj, k)))
        fronts = {j: _pareto(f) for j, f in nxt.items()}
        if not fronts:
            break
    final = fronts.get(N - 1)
    if not final:
        raise InfeasiblePlanError("no bit assignment fits the device memory budgets")
    best = min(final, key=lambda lab: (lab[1], lab[2], lab[3]))
    owner, ks = [], []
    lab = best
    while lab is not None:
        owner.append(lab[5][0])
        ks.append(lab[5][1])
        lab = lab[4]
    owner.reverse()
    ks.reverse()
    stages = _stages_from_owner(owner, N)
    return evaluate(inst, stages, [inst.bits[k] for k in ks])


def _pareto(labels: list) -> list:
    labels.sort(key=lambda lab: (lab[0], lab[1], lab[2], lab[3]))
    out, best = [], None
    for lab in labels:
        key = (lab[1], lab[2], lab[3])
        if best is None or key < best:
            out.append(lab)
            best = key
    return out


def _stages_from_owner(owner: Sequence[int], N: int) -> tuple:
    stages = []
    for j in range(N):
        idx = [i for i, o in enumerate(owner) if o == j]
        stages.append((idx[0], idx[-1] + 1))
    return tuple(stages)


# ---------------------------------------------------------------------------

def _realize(inst: IlpInstance, counts: Sequence[int], multisets: Sequence[Counter]):
    """Contiguous stages with the given sizes; bits placed per stage by min-cost matching."""
    stages, bits = [], []
    start = 0
    for j, (c, ms) in enumerate(zip(counts, multisets)):
        slots = [b for b in sorted(ms) for _ in range(ms[b])]
        layers = range(start, start + c)
        kidx = [inst.bits.index(b) for b in slots]
        cost = np.empty((c, c))
        for r, i in enumerate(layers):
            for q, k in enumerate(kidx):
                x = inst.lat_pre[i, j, k] + inst.lat_dec[i, j, k] + inst.theta * inst.omega[i, k]
                cost[r, q] = x if np.isfinite(x) else _BIG
        rows, cols = linear_sum_assignment(cost)
        if np.any(cost[rows, cols] >= _BIG):
            return None
        stage_bits = [0] * c
        for r, q in zip(rows, cols):
            stage_bits[r] = slots[q]
        bits.extend(stage_bits)
        stages.append((start, start + c))
        start += c
    cand = evaluate(inst, stages, bits)
    return cand if cand.feasible else None


def _straggler(inst: IlpInstance, cand: PlanCandidate) -> int:
    pre, dec = stage_times(inst, cand.stages, cand.bits)
    weight = (inst.pre_bubbles + 1) * pre + (inst.dec_bubbles + 1) * dec
    return int(np.argmax(weight))


def _moves(counts, multisets, st: int, rules, relocate_bits, convert_bits=()):
    N = len(counts)
    # straggler re-quantizes one of its layers in place
    for b in sorted(multisets[st]):
        for b2 in convert_bits:
            if b2 != b:
                ms = [Counter(m) for m in multisets]
                ms[st][b] -= 1
                ms[st][b2] += 1
                if ms[st][b] == 0:
                    del ms[st][b]
                yield list(counts), ms
    for pi in range(N):
        if pi == st:
            continue
        for lo, hi, nums in rules:
            # straggler hands over `nums` low-bit layers for one high-bit layer
            if multisets[st][lo] >= nums and multisets[pi][hi] >= 1 and counts[st] - nums + 1 >= 1:
                yield _apply(counts, multisets, st, pi, give={lo: nums}, take={hi: 1})
            # straggler hands over one high-bit layer for `nums` low-bit layers
            if multisets[st][hi] >= 1 and multisets[pi][lo] >= nums and counts[pi] - nums + 1 >= 1:
                yield _apply(counts, multisets, st, pi, give={hi: 1}, take={lo: nums})
        for b in relocate_bits:
            if multisets[st][b] >= 1 and counts[st] > 1:
                yield _apply(counts, multisets, st, pi, give={b: 1}, take={})


def _apply(counts, multisets, st, pi, give, take):
    counts = list(counts)
    multisets = [Counter(m) for m in multisets]
    for b, x in give.items():
        multisets[st][b] -= x
        multisets[pi][b] += x
        counts[st] -= x
        counts[pi] += x
    for b, x in take.items():
        multisets[pi][b] -= x
        multisets[st][b] += x
        counts[pi] -= x
        counts[st] += x
    for m in multisets:
        for b in [b for b, x in m.items() if x == 0]:
            del m[b]
    return counts, multisets


def bitwidth_transfer(inst: IlpInstance, start: PlanCandidate,
                      rules: Optional[Sequence[Tuple[int, int, int]]] = None,
                      relocate: bool = True, convert: bool = True, max_iter: int = 10_000,
                      trace: Optional[list] = None) -> PlanCandidate:
    """Local search from ``start``; every accepted move strictly lowers the objective.

    ``relocate`` adds single-layer moves (same bitwidth) from the straggler to
    another stage alongside the precision-exchange rules; ``convert`` adds
    in-place bitwidth changes of one straggler layer.
    """
    if not start.feasible or start.objective is None:
        raise InfeasiblePlanError("bitwidth transfer needs a feasible start")
    rules = default_rules(inst.bits) if rules is None else tuple(rules)
    relocate_bits = inst.bits if relocate else ()
    convert_bits = inst.bits if convert else ()
    current = start
    if trace is not None:
        trace.append(current.objective.total)
    for _ in range(max_iter):
        counts = [e - s for s, e in current.stages]
        multisets = [Counter(current.bits[s:e]) for s, e in current.stages]
        st = _straggler(inst, current)
        best = None
        seen = set()
        for new_counts, new_ms in _moves(counts, multisets, st, rules, relocate_bits,
                                             convert_bits):
            key = (tuple(new_counts), tuple(tuple(sorted(m.items())) for m in new_ms))
            if key in seen:
                continue
            seen.add(key)
            cand = _realize(inst, new_counts, new_ms)
            if cand is None:
                continue
            if best is None or cand.objective.total < best.objective.total:
                best = cand
        if best is None or not best.objective.total < current.objective.total:
            break
        current = best
        if trace is not None:
            trace.append(current.objective.total)
    return current
