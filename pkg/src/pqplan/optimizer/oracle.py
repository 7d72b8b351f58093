"""Exhaustive reference solver for tiny instances."""

from __future__ import annotations

import itertools
from math import comb
from typing import Iterator, Tuple

import numpy as np

from .instance import IlpInstance, InfeasiblePlanError, PlanCandidate, SolverGuardError, evaluate

MAX_LAYERS = 8
MAX_DEVICES = 3
MAX_BITS = 3


def _check_guard(inst: IlpInstance) -> None:
    L, N, K = inst.lat_pre.shape
    if L > MAX_LAYERS or N > MAX_DEVICES or K > MAX_BITS:
        raise SolverGuardError(
            f"oracle guard exceeded: L={L} (max {MAX_LAYERS}), N={N} (max {MAX_DEVICES}), "
            f"|BITs|={K} (max {MAX_BITS})")


def partitions(L: int, N: int) -> Iterator[Tuple[Tuple[int, int], ...]]:
    """Contiguous partitions of L layers into N nonempty stages, in lexicographic order."""
    for cuts in itertools.combinations(range(1, L), N - 1):
        edges = (0,) + cuts + (L,)
        yield tuple((edges[j], edges[j + 1]) for j in range(N))


def candidate_count(L: int, N: int, K: int) -> int:
    return comb(L - 1, N - 1) * K ** L if N <= L else 0


def enumerate_candidates(inst: IlpInstance) -> Iterator[Tuple[tuple, tuple]]:
    _check_guard(inst)
    L, N = inst.num_layers, inst.num_devices
    for stages in partitions(L, N):
        for bits in itertools.product(inst.bits, repeat=L):
            yield stages, bits


def brute_force_oracle(inst: IlpInstance, rel_tol: float = 1e-12) -> PlanCandidate:
    """Globally optimal candidate; ties go to the larger bit sum, then enumeration order."""
    _check_guard(inst)
    L, N, K = inst.lat_pre.shape
    if N > L:
        raise InfeasiblePlanError(f"{N} stages cannot each hold a layer of a {L}-layer model")
    codes = np.array(list(itertools.product(range(K), repeat=L)), dtype=np.int64).reshape(-1, L)
    bit_arr = np.array(inst.bits)[codes]
    bit_sum = bit_arr.sum(axis=1)
    rows = np.arange(L)
    om = inst.omega[rows, codes].sum(axis=1)
    mem = inst.mem[rows, codes]
    a, c = inst.pre_bubbles, inst.dec_bubbles
    cp, cd = float(inst.comm_pre.max()), float(inst.comm_dec.max())

    best = None  # (total, -bitsum, order, stages, bits)
    order = 0
    for stages in partitions(L, N):
        owner = np.empty(L, dtype=np.int64)
        for j, (s, e) in enumerate(stages):
            owner[s:e] = j
        pre = inst.lat_pre[rows, owner, codes]
        dec = inst.lat_dec[rows, owner, codes]
        feasible = np.isfinite(pre).all(axis=1) & np.isfinite(dec).all(axis=1)
        pre_st = np.stack([pre[:, s:e].sum(axis=1) for s, e in stages], axis=1)
        dec_st = np.stack([dec[:, s:e].sum(axis=1) for s, e in stages], axis=1)
        mem_st = np.stack([mem[:, s:e].sum(axis=1) for s, e in stages], axis=1)
        feasible &= (mem_st <= inst.budget[None, :]).all(axis=1)
        if not feasible.any():
            order += len(codes)
            continue
        with np.errstate(invalid="ignore"):
            total = (a * np.maximum(pre_st.max(axis=1), cp) + c * np.maximum(dec_st.max(axis=1), cd)
                     + pre_st.sum(axis=1) + dec_st.sum(axis=1) + inst.theta * om)
        total = np.where(feasible, total, np.inf)
        lo = total.min()
        tol = rel_tol * max(1.0, abs(lo))
        tied = np.flatnonzero(total <= lo + tol)
        pick = tied[np.argmax(bit_sum[tied])]  # argmax returns the first maximum
        key = (float(total[pick]), int(bit_sum[pick]), order + int(pick))
        if best is None:
            best = key + (stages, tuple(int(b) for b in bit_arr[pick]))
        else:
            btol = rel_tol * max(1.0, abs(best[0]), abs(key[0]))
            if key[0] < best[0] - btol or (abs(key[0] - best[0]) <= btol and key[1] > best[1]):
                best = key + (stages, tuple(int(b) for b in bit_arr[pick]))
        order += len(codes)
    if best is None:
        raise InfeasiblePlanError("no assignment fits the device memory budgets")
    return evaluate(inst, best[3], best[4], optimal=True, nodes=order)
