"""Standard MILP formulation of an instance: HiGHS backend and CPLEX-LP export.

Variables: z[i,j,k] (layer i on stage j at bit k, only for supported bits),
u[i,j] (layer i on stage j), and the two straggler times Tp, Td. Contiguity is
written on cumulative stage indicators so the device index never decreases.
"""

from __future__ import annotations

import time
from typing import Dict, List, Tuple

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import lil_matrix

from .instance import IlpInstance, InfeasiblePlanError, PlanCandidate, evaluate


class _Model:
    def __init__(self, inst: IlpInstance):
        L, N, K = inst.lat_pre.shape
        allowed = inst.allowed
        self.names: List[str] = []
        self.z: Dict[Tuple[int, int, int], int] = {}
        self.u: Dict[Tuple[int, int], int] = {}
        for i in range(L):
            for j in range(N):
                for k in range(K):
                    if allowed[j, k]:
                        self.z[i, j, k] = len(self.names)
                        self.names.append(f"z_{i}_{j}_{inst.bits[k]}")
        for i in range(L):
            for j in range(N):
                self.u[i, j] = len(self.names)
                self.names.append(f"u_{i}_{j}")
        self.tp = len(self.names)
        self.names.append("Tp")
        self.td = len(self.names)
        self.names.append("Td")
        nv = len(self.names)

        self.c = np.zeros(nv)
        for (i, j, k), v in self.z.items():
            self.c[v] = (inst.lat_pre[i, j, k] + inst.lat_dec[i, j, k]
                         + inst.theta * inst.omega[i, k])
        self.c[self.tp] = inst.pre_bubbles
        self.c[self.td] = inst.dec_bubbles

        rows: List[Tuple[Dict[int, float], float, float, str]] = []
        for i in range(L):
            rows.append(({self.z[i, j, k]: 1.0 for j in range(N) for k in range(K)
                          if (i, j, k) in self.z}, 1.0, 1.0, f"one_{i}"))
        for i in range(L):
            for j in range(N):
                coeffs = {self.u[i, j]: 1.0}
                for k in range(K):
                    if (i, j, k) in self.z:
                        coeffs[self.z[i, j, k]] = -1.0
                rows.append((coeffs, 0.0, 0.0, f"link_{i}_{j}"))
        for i in range(1, L):
            for j in range(N - 1):
                # U_i(j) <= U_{i-1}(j): cumulative share of stages 0..j never grows
                coeffs: Dict[int, float] = {}
                for q in range(j + 1):
                    coeffs[self.u[i, q]] = coeffs.get(self.u[i, q], 0.0) + 1.0
                    coeffs[self.u[i - 1, q]] = coeffs.get(self.u[i - 1, q], 0.0) - 1.0
                rows.append((coeffs, -np.inf, 0.0, f"mono_{i}_{j}"))
                # U_{i-1}(j) <= U_i(j+1): at most one stage advance per layer
                coeffs = {}
                for q in range(j + 1):
                    coeffs[self.u[i - 1, q]] = coeffs.get(self.u[i - 1, q], 0.0) + 1.0
                for q in range(j + 2):
                    coeffs[self.u[i, q]] = coeffs.get(self.u[i, q], 0.0) - 1.0
                rows.append((coeffs, -np.inf, 0.0, f"step_{i}_{j}"))
        rows.append(({self.u[0, 0]: 1.0}, 1.0, 1.0, "first"))
        rows.append(({self.u[L - 1, N - 1]: 1.0}, 1.0, 1.0, "last"))
        for j in range(N):
            # memory rows are normalised by the budget for numerical comfort
            scale = float(max(1, int(inst.budget[j]) if inst.budget[j] > 0 else 1))
            coeffs = {self.z[i, j, k]: float(inst.mem[i, k]) / scale
                      for i in range(L) for k in range(K) if (i, j, k) in self.z}
            rows.append((coeffs, -np.inf, float(inst.budget[j]) / scale, f"mem_{j}"))
            coeffs = {self.z[i, j, k]: float(inst.lat_pre[i, j, k])
                      for i in range(L) for k in range(K) if (i, j, k) in self.z}
            coeffs[self.tp] = -1.0
            rows.append((coeffs, -np.inf, 0.0, f"tpre_{j}"))
            coeffs = {self.z[i, j, k]: float(inst.lat_dec[i, j, k])
                      for i in range(L) for k in range(K) if (i, j, k) in self.z}
            coeffs[self.td] = -1.0
            rows.append((coeffs, -np.inf, 0.0, f"tdec_{j}"))
        self.rows = rows
        self.lb = np.zeros(nv)
        self.ub = np.ones(nv)
        self.lb[self.tp] = float(inst.comm_pre.max())
        self.lb[self.td] = float(inst.comm_dec.max())
        self.ub[self.tp] = self.ub[self.td] = np.inf
        self.integrality = np.ones(nv)
        self.integrality[self.tp] = self.integrality[self.td] = 0


def solve_highs(inst: IlpInstance, time_limit_s: float = 60.0) -> PlanCandidate:
    """Solve with scipy's HiGHS MILP interface (cross-check backend)."""
    if inst.num_devices > inst.num_layers:
        raise InfeasiblePlanError("more stages than layers")
    m = _Model(inst)
    A = lil_matrix((len(m.rows), len(m.names)))
    lo = np.empty(len(m.rows))
    hi = np.empty(len(m.rows))
    for r, (coeffs, a, b, _) in enumerate(m.rows):
        for v, x in coeffs.items():
            A[r, v] = x
        lo[r], hi[r] = a, b
    start = time.monotonic()
    res = milp(m.c, constraints=LinearConstraint(A.tocsr(), lo, hi),
               integrality=m.integrality, bounds=Bounds(m.lb, m.ub),
               options={"time_limit": float(time_limit_s), "mip_rel_gap": 1e-12})
    if res.x is None:
        raise InfeasiblePlanError(f"HiGHS found no feasible assignment ({res.message})")
    L, N = inst.num_layers, inst.num_devices
    owner, bits = [], []
    for i in range(L):
        (j, k) = max(((j, k) for (ii, j, k) in m.z if ii == i), key=lambda jk: res.x[m.z[i, jk[0], jk[1]]])
        owner.append(j)
        bits.append(inst.bits[k])
    stages = []
    for j in range(N):
        idx = [i for i, o in enumerate(owner) if o == j]
        stages.append((idx[0], idx[-1] + 1) if idx else (0, 0))
    optimal = res.status == 0 and time.monotonic() - start < time_limit_s
    return evaluate(inst, stages, bits, optimal=optimal)


def _fmt(x: float) -> str:
    return repr(float(x))


def _wrap(terms: List[str], width: int = 160) -> List[str]:
    # leaves room for the row-name prefix within 200-character lines
    lines, cur = [], ""
    for t in terms:
        if cur and len(cur) + len(t) + 1 > width:
            lines.append(cur)
            cur = ""
        cur = f"{cur} {t}" if cur else t
    lines.append(cur)
    return lines


def _terms(coeffs: Dict[int, float], names: List[str]) -> List[str]:
    out = []
    for v, x in sorted(coeffs.items()):
        if x == 0:
            continue
        sign = "-" if x < 0 else "+"
        out.append(f"{sign} {_fmt(abs(x))} {names[v]}")
    if out and out[0].startswith("+ "):
        out[0] = out[0][2:]
    return out or ["0 Tp"]


def export_lp(inst: IlpInstance, title: str = "pipeline plan") -> str:
    """The instance as a CPLEX LP-format text model, readable by common MILP solvers."""
    m = _Model(inst)
    out = [f"\\ {title}", "Minimize"]
    obj = _terms({v: x for v, x in enumerate(m.c)}, m.names)
    out += [" obj: " + line if n == 0 else "  " + line for n, line in enumerate(_wrap(obj))]
    out.append("Subject To")
    for coeffs, lo, hi, name in m.rows:
        if lo == hi:
            rel = f"= {_fmt(hi)}"
        elif np.isfinite(hi):
            rel = f"<= {_fmt(hi)}"
        else:
            rel = f">= {_fmt(lo)}"
        body = _wrap(_terms(coeffs, m.names) + [rel])
        out += [f" {name}: " + line if n == 0 else "  " + line for n, line in enumerate(body)]
    out.append("Bounds")
    out.append(f" Tp >= {_fmt(m.lb[m.tp])}")
    out.append(f" Td >= {_fmt(m.lb[m.td])}")
    out.append("Binary")
    out += [" " + line for line in _wrap([n for n in m.names if n not in ("Tp", "Td")])]
    out.append("End")
    return "\n".join(out) + "\n"
