"""Exact depth-first branch-and-bound over (stage boundary, bitwidth) decisions.

Layers are assigned in order; at each layer the search either keeps the current
device or advances to the next one, then picks a bitwidth. Lower bounds combine
optimistic per-layer minima for the separable part of the objective with
load-balancing bounds on the two straggler terms.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import List, Optional


from .instance import IlpInstance, InfeasiblePlanError, PlanCandidate, evaluate

log = logging.getLogger(__name__)

INF = math.inf


@dataclass(frozen=True)
class SolverOptions:
    time_limit_s: float = 60.0
    backend: str = "bnb"          # "bnb" or "highs"
    rel_tol: float = 1e-12


class _Timeout(Exception):
    pass


class _Search:
    def __init__(self, inst: IlpInstance, cutoff: Optional[float], deadline: float,
                 rel_tol: float):
        self.inst = inst
        L, N, K = inst.lat_pre.shape
        self.L, self.N, self.K = L, N, K
        self.deadline = deadline
        self.rel_tol = rel_tol
        self.a = inst.pre_bubbles
        self.c = inst.dec_bubbles
        self.cp = float(inst.comm_pre.max())
        self.cd = float(inst.comm_dec.max())
        self.R = [int(x) for x in inst.budget]
        theta = inst.theta
        p, d, m, om = inst.lat_pre, inst.lat_dec, inst.mem, inst.omega

        # per (layer, device) options, dominated bitwidths dropped
        self.opts: List[List[list]] = []
        for i in range(L):
            row = []
            for j in range(N):
                cand = []
                for k in range(K):
                    if math.isfinite(p[i, j, k]) and math.isfinite(d[i, j, k]):
                        pk, dk = float(p[i, j, k]), float(d[i, j, k])
                        wk = pk + dk + theta * float(om[i, k])
                        cand.append((k, pk, dk, wk, int(m[i, k]), inst.bits[k]))
                keep = []
                for x in cand:
                    dominated = any(
                        y is not x and y[1] <= x[1] and y[2] <= x[2] and y[3] <= x[3] and y[4] <= x[4]
                        and (y[1], y[2], y[3], y[4]) != (x[1], x[2], x[3], x[4])
                        for y in cand)
                    if not dominated:
                        keep.append(x)
                # identical duplicates: keep the higher bitwidth only
                uniq = {}
                for x in keep:
                    key = (x[1], x[2], x[3], x[4])
                    if key not in uniq or x[5] > uniq[key][5]:
                        uniq[key] = x
                row.append(sorted(uniq.values(), key=lambda x: (x[3], -x[5])))
            self.opts.append(row)

        # suffix minima over layers i.., devices j..
        sufW = [[0.0] * N for _ in range(L + 1)]
        sufP = [[0.0] * N for _ in range(L + 1)]
        sufD = [[0.0] * N for _ in range(L + 1)]
        sufM = [[0] * N for _ in range(L + 1)]
        # per device minima over remaining layers (for the "every later stage is nonempty" bound)
        devP = [[INF] * N for _ in range(L + 1)]
        devD = [[INF] * N for _ in range(L + 1)]
        for i in range(L - 1, -1, -1):
            mw, mp, md, mm = INF, INF, INF, None
            for j in range(N - 1, -1, -1):
                for x in self.opts[i][j]:
                    mw = min(mw, x[3])
                    mp = min(mp, x[1])
                    md = min(md, x[2])
                    mm = x[4] if mm is None else min(mm, x[4])
                sufW[i][j] = sufW[i + 1][j] + mw
                sufP[i][j] = sufP[i + 1][j] + mp
                sufD[i][j] = sufD[i + 1][j] + md
                sufM[i][j] = sufM[i + 1][j] + (mm if mm is not None else 10 ** 30)
                own_p = min((x[1] for x in self.opts[i][j]), default=INF)
                own_d = min((x[2] for x in self.opts[i][j]), default=INF)
                devP[i][j] = min(devP[i + 1][j], own_p)
                devD[i][j] = min(devD[i + 1][j], own_d)
        # futP[i][j]: some later stage k > j must hold a layer from i.., costing >= devP[i][k]
        futP = [[0.0] * N for _ in range(L + 1)]
        futD = [[0.0] * N for _ in range(L + 1)]
        for i in range(L + 1):
            for j in range(N):
                later_p = [devP[i][k] for k in range(j + 1, N)]
                later_d = [devD[i][k] for k in range(j + 1, N)]
                futP[i][j] = max(later_p) if later_p else 0.0
                futD[i][j] = max(later_d) if later_d else 0.0
        # harmonic load bound: device k can absorb at most (T - load)/devP[i][k] more layers
        harP = [[0.0] * N for _ in range(L + 1)]
        harD = [[0.0] * N for _ in range(L + 1)]
        for i in range(L + 1):
            for j in range(N):
                harP[i][j] = sum(1.0 / x if x > 0 else INF for x in devP[i][j:])
                harD[i][j] = sum(1.0 / x if x > 0 else INF for x in devD[i][j:])
        self.devP, self.devD, self.harP, self.harD = devP, devD, harP, harD
        self.sufW, self.sufP, self.sufD, self.sufM = sufW, sufP, sufD, sufM
        self.futP, self.futD = futP, futD
        self.capR = [sum(self.R[k] for k in range(j + 1, N)) for j in range(N)]

        self.memo: dict = {}
        self.memo_limit = 2_000_000
        self.best = INF if cutoff is None else float(cutoff)
        self.best_path = None
        self.nodes = 0
        self.path = [0] * L

    def limit(self) -> float:
        # prune threshold: candidates must beat the incumbent by a relative margin
        if self.best == INF:
            return INF
        return self.best - self.rel_tol * max(1.0, abs(self.best))

    def bound(self, i, j, P, D, mP, mD, S) -> float:
        nst = self.N - j
        rem = self.L - i
        tp = max(self.cp, mP, P, (P + self.sufP[i][j]) / nst, self.futP[i][j])
        td = max(self.cd, mD, D, (D + self.sufD[i][j]) / nst, self.futD[i][j])
        if rem:
            h = self.harP[i][j]
            if h < INF:
                tp = max(tp, (rem + P / self.devP[i][j]) / h)
            h = self.harD[i][j]
            if h < INF:
                td = max(td, (rem + D / self.devD[i][j]) / h)
        return self.a * tp + self.c * td + S + self.sufW[i][j]

    def dominated(self, i, j, P, D, mem, mP, mD, S) -> bool:
        """True when an earlier partial assignment with the same stage state was at least as good.

        Stage loads are keyed after rounding to ~1e-12 relative so that permutations
        of one bit multiset (summed in different orders) share a key.
        """
        key = (i, j, mem, float(f"{P:.12e}"), float(f"{D:.12e}"))
        entry = self.memo.get(key)
        if entry is None:
            if len(self.memo) < self.memo_limit:
                self.memo[key] = [(mP, mD, S)]
            return False
        for a, b, c in entry:
            if a <= mP and b <= mD and c <= S:
                return True
        entry[:] = [e for e in entry if not (mP <= e[0] and mD <= e[1] and S <= e[2])]
        entry.append((mP, mD, S))
        return False

    def run(self):
        N, L = self.N, self.L
        if N > L:
            return
        for x in self.opts[0][0]:
            if x[4] > self.R[0]:
                continue
            self.path[0] = (0, x[5])
            lb = self.bound(1, 0, x[1], x[2], 0.0, 0.0, x[3])
            if lb < self.limit():
                self.dfs(1, 0, x[1], x[2], x[4], 0.0, 0.0, x[3])

    def dfs(self, i, j, P, D, mem, mP, mD, S):
        self.nodes += 1
        if not self.nodes & 1023 and time.monotonic() > self.deadline:
            raise _Timeout
        L, N = self.L, self.N
        if i == L:
            if j != N - 1:
                return
            total = (self.a * max(self.cp, mP, P) + self.c * max(self.cd, mD, D) + S)
            if total < self.limit():
                self.best = total
                self.best_path = list(self.path)
            return
        if self.dominated(i, j, P, D, mem, mP, mD, S):
            return
        rem_after = L - i - 1
        children = []
        for jj in (j, j + 1):
            if jj >= N or rem_after < N - 1 - jj:
                continue
            if jj == j:
                P0, D0, m0, cP, cD = P, D, mem, mP, mD
            else:
                P0, D0, m0 = 0.0, 0.0, 0
                cP, cD = (mP if mP > P else P), (mD if mD > D else D)
            Rj = self.R[jj]
            room = self.capR[jj]
            need = self.sufM[i + 1][jj]
            for x in self.opts[i][jj]:
                nm = m0 + x[4]
                if nm > Rj or need > Rj - nm + room:
                    continue
                nP, nD, nS = P0 + x[1], D0 + x[2], S + x[3]
                lb = self.bound(i + 1, jj, nP, nD, cP, cD, nS)
                children.append((lb, -x[5], jj, nP, nD, nm, cP, cD, nS, x[5]))
        children.sort(key=lambda ch: (ch[0], ch[1], ch[2]))
        for lb, _, jj, nP, nD, nm, cP, cD, nS, bit in children:
            if lb >= self.limit():
                break
            self.path[i] = (jj, bit)
            self.dfs(i + 1, jj, nP, nD, nm, cP, cD, nS)


def _path_to_candidate(inst: IlpInstance, path, optimal: bool, nodes: int) -> PlanCandidate:
    N = inst.num_devices
    starts = [None] * N
    ends = [0] * N
    for i, (j, _) in enumerate(path):
        if starts[j] is None:
            starts[j] = i
        ends[j] = i + 1
    stages = tuple(zip(starts, ends))
    bits = tuple(b for _, b in path)
    return evaluate(inst, stages, bits, optimal=optimal, nodes=nodes)


def solve_bnb(inst: IlpInstance, time_limit_s: float = 60.0, cutoff: Optional[float] = None,
              rel_tol: float = 1e-12) -> Optional[PlanCandidate]:
    """Optimal candidate, or None when nothing beats ``cutoff``.

    Raises InfeasiblePlanError when no feasible assignment exists (and no cutoff
    was given). On timeout the incumbent is returned with ``optimal=False``.
    """
    search = _Search(inst, cutoff, time.monotonic() + time_limit_s, rel_tol)
    optimal = True
    try:
        search.run()
    except _Timeout:
        optimal = False
        log.info("branch-and-bound hit the %.1fs time limit after %d nodes",
                 time_limit_s, search.nodes)
    if search.best_path is None:
        if cutoff is not None and optimal:
            return None
        if not optimal:
            raise SolverTimeoutError(f"no feasible plan found within {time_limit_s}s")
        raise InfeasiblePlanError("no assignment fits the device memory budgets")
    return _path_to_candidate(inst, search.best_path, optimal, search.nodes)


class SolverTimeoutError(InfeasiblePlanError):
    pass


def solve_ilp(inst: IlpInstance, options: SolverOptions = SolverOptions(),
              cutoff: Optional[float] = None) -> Optional[PlanCandidate]:
    """Solve one fixed-ordering, fixed-micro-batch subproblem."""
    if options.backend == "bnb":
        return solve_bnb(inst, options.time_limit_s, cutoff, options.rel_tol)
    if options.backend == "highs":
        from .milp import solve_highs
        cand = solve_highs(inst, options.time_limit_s)
        if cutoff is not None and cand.objective.total >= cutoff:
            return None
        return cand
    raise ValueError(f"unknown solver backend {options.backend!r}")
