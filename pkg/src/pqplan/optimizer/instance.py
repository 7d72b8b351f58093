"""Fixed-ordering, fixed-micro-batch planning instance and its objective."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core import ClusterSpec, DeviceSpec, ModelSpec, ObjectiveBreakdown, PlanningError, Workload
from ..indicator import IndicatorTable
from ..latcost import (LatencyModel, comm_bytes_decode, comm_bytes_prefill, predict_decode,
                       predict_prefill)
from ..memcost import DEFAULT_TMP_ALPHA, device_tmp_bytes, embed_mem_bytes, layer_mem_bytes


class InfeasiblePlanError(PlanningError):
    """No assignment satisfies the memory and contiguity constraints."""


class SolverGuardError(PlanningError):
    pass


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class IlpInstance:
    """All coefficients of the layer/bit/device assignment problem.

    ``lat_pre``/``lat_dec`` have shape (L, N, K) and hold ``inf`` where bit k is not
    supported on device j. ``budget`` is each device's capacity minus its
    per-device reservations (temporaries, plus embeddings on the first stage).
    """
    bits: tuple
    lat_pre: np.ndarray
    lat_dec: np.ndarray
    mem: np.ndarray
    budget: np.ndarray
    omega: np.ndarray
    theta: float
    global_batch: int
    eta: int
    xi: int
    gen_len: int
    comm_pre: np.ndarray
    comm_dec: np.ndarray
    device_names: tuple = ()
    capacity: Optional[np.ndarray] = None
    group_sizes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        for name in ("lat_pre", "lat_dec", "omega", "comm_pre", "comm_dec"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "mem", _frozen(self.mem, np.int64))
        object.__setattr__(self, "budget", _frozen(self.budget, np.int64))
        if self.capacity is not None:
            object.__setattr__(self, "capacity", _frozen(self.capacity, np.int64))
        L, N, K = self.lat_pre.shape
        if self.lat_dec.shape != (L, N, K) or self.mem.shape != (L, K) or self.omega.shape != (L, K):
            raise ValueError("inconsistent instance table shapes")
        if self.budget.shape != (N,) or self.comm_pre.shape != (N,) or self.comm_dec.shape != (N,):
            raise ValueError("per-device arrays must have length N")
        if not 1 <= self.eta <= self.xi <= self.global_batch:
            raise ValueError("need 1 <= eta <= xi <= B")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if not self.device_names:
            object.__setattr__(self, "device_names", tuple(f"dev{j}" for j in range(N)))
        if not self.group_sizes:
            object.__setattr__(self, "group_sizes", (1,) * L)
        if len(self.group_sizes) != L:
            raise ValueError("group_sizes must have one entry per layer")

    @property
    def num_layers(self) -> int:
        return self.lat_pre.shape[0]

    @property
    def num_devices(self) -> int:
        return self.lat_pre.shape[1]

    @property
    def allowed(self) -> np.ndarray:
        """(N, K) mask of bitwidths usable on each device."""
        return np.isfinite(self.lat_pre[0]) & np.isfinite(self.lat_dec[0])

    @property
    def pre_bubbles(self) -> int:
        return ceil_div(self.global_batch, self.eta) - 1

    @property
    def dec_bubbles(self) -> int:
        return (ceil_div(self.global_batch, self.xi) - 1) * (self.gen_len - 1)

    def with_theta(self, theta: float) -> "IlpInstance":
        return replace(self, theta=float(theta))


@dataclass(frozen=True)
class PlanCandidate:
    stages: tuple            # (start, end) per stage, in instance layer units
    bits: tuple              # one bitwidth per instance layer
    objective: Optional[ObjectiveBreakdown] = None
    feasible: bool = True
    optimal: bool = False
    nodes: int = 0

    @property
    def bit_sum(self) -> int:
        return int(sum(self.bits))


def stage_of_layers(stages: Sequence[Tuple[int, int]]) -> List[int]:
    owner = []
    for j, (start, end) in enumerate(stages):
        owner.extend([j] * (end - start))
    return owner


def stage_times(inst: IlpInstance, stages, bits) -> Tuple[np.ndarray, np.ndarray]:
    kidx = {b: k for k, b in enumerate(inst.bits)}
    N = inst.num_devices
    pre = np.zeros(N)
    dec = np.zeros(N)
    for j, (start, end) in enumerate(stages):
        for i in range(start, end):
            k = kidx[bits[i]]
            pre[j] += inst.lat_pre[i, j, k]
            dec[j] += inst.lat_dec[i, j, k]
    return pre, dec


def stage_memory(inst: IlpInstance, stages, bits) -> np.ndarray:
    kidx = {b: k for k, b in enumerate(inst.bits)}
    used = np.zeros(inst.num_devices, dtype=np.int64)
    for j, (start, end) in enumerate(stages):
        used[j] = sum(int(inst.mem[i, kidx[bits[i]]]) for i in range(start, end))
    return used


def violations(inst: IlpInstance, stages, bits) -> List[str]:
    """Human-readable list of violated constraints (empty when feasible)."""
    out = []
    L, N = inst.num_layers, inst.num_devices
    if len(stages) != N:
        out.append(f"expected {N} stages, got {len(stages)}")
        return out
    expected = 0
    for j, (start, end) in enumerate(stages):
        if start != expected or end <= start:
            out.append(f"stage {j} range [{start}, {end}) breaks contiguity")
        expected = end
    if expected != L:
        out.append(f"partition ends at {expected}, expected {L}")
    if len(bits) != L:
        out.append(f"{len(bits)} bitwidths for {L} layers")
    if out:
        return out
    unknown = [b for b in bits if b not in inst.bits]
    if unknown:
        return [f"bitwidths outside the bit set: {sorted(set(unknown))}"]
    allowed = inst.allowed
    kidx = {b: k for k, b in enumerate(inst.bits)}
    for j, (start, end) in enumerate(stages):
        for i in range(start, end):
            if not allowed[j, kidx[bits[i]]]:
                out.append(f"layer {i}: bit {bits[i]} unsupported on stage {j}")
    used = stage_memory(inst, stages, bits)
    for j in range(N):
        if used[j] > inst.budget[j]:
            out.append(f"stage {j} needs {used[j]} bytes, budget {inst.budget[j]}")
    return out


def objective(inst: IlpInstance, stages, bits) -> ObjectiveBreakdown:
    """Pipeline latency with bubble terms plus the theta-weighted indicator sum."""
    pre, dec = stage_times(inst, stages, bits)
    kidx = {b: k for k, b in enumerate(inst.bits)}
    omega_sum = float(sum(inst.omega[i, kidx[b]] for i, b in enumerate(bits)))
    t_max_pre = float(max(pre.max(), inst.comm_pre.max()))
    t_max_dec = float(max(dec.max(), inst.comm_dec.max()))
    a, c = inst.pre_bubbles, inst.dec_bubbles
    t_pre, t_dec = float(pre.sum()), float(dec.sum())
    total = a * t_max_pre + c * t_max_dec + t_pre + t_dec + inst.theta * omega_sum
    return ObjectiveBreakdown(t_max_pre, t_max_dec, t_pre, t_dec, omega_sum, float(inst.theta),
                              float(total), a, c)


def evaluate(inst: IlpInstance, stages, bits, **kwargs) -> PlanCandidate:
    stages = tuple((int(a), int(b)) for a, b in stages)
    bits = tuple(int(b) for b in bits)
    feasible = not violations(inst, stages, bits)
    obj = objective(inst, stages, bits) if feasible else None
    return PlanCandidate(stages, bits, obj, feasible, **kwargs)


# ---------------------------------------------------------------------------

def build_instance(model: ModelSpec, cluster: ClusterSpec, order: Sequence[int],
                   workload: Workload, bits: Sequence[int], latency: LatencyModel,
                   indicator: IndicatorTable, theta: float, eta: int, xi: int,
                   tmp_alpha: float = DEFAULT_TMP_ALPHA, bit_kv: int = 16) -> IlpInstance:
    """Instantiate the per-(ordering, eta, xi) subproblem from the cost models."""
    bits = tuple(sorted(bits))
    L, N, K = model.num_layers, len(order), len(bits)
    if indicator.num_layers != L:
        raise PlanningError(f"indicator table has {indicator.num_layers} layers, model has {L}")
    omega = indicator.restricted(bits).omega
    s, n = workload.prompt_len, workload.gen_len
    pre = np.full((N, K), np.inf)
    dec = np.full((N, K), np.inf)
    devices: List[DeviceSpec] = [cluster.devices[d] for d in order]
    for j, dev in enumerate(devices):
        for k, b in enumerate(bits):
            if (b in dev.supported_bits and latency.has(dev.name, b, "prefill")
                    and latency.has(dev.name, b, "decode")):
                pre[j, k] = predict_prefill(latency, dev.name, b, eta, s)
                dec[j, k] = predict_decode(latency, dev.name, b, xi, s, n / 2)
    mem_row = [layer_mem_bytes(model, b, workload, bit_kv) for b in bits]
    tmp = device_tmp_bytes(model, workload, eta, xi, tmp_alpha)
    emb = embed_mem_bytes(model)
    capacity = np.array([dev.mem_capacity for dev in devices], dtype=np.int64)
    budget = capacity - tmp
    budget[0] -= emb
    comm_pre, comm_dec = np.zeros(N), np.zeros(N)
    for j in range(N):
        bw = cluster.bandwidth(order[j], order[(j + 1) % N])
        comm_pre[j] = comm_bytes_prefill(model.hidden_dim, eta, s) / bw
        comm_dec[j] = comm_bytes_decode(model.hidden_dim, xi) / bw
    return IlpInstance(
        bits=bits,
        lat_pre=np.broadcast_to(pre, (L, N, K)),
        lat_dec=np.broadcast_to(dec, (L, N, K)),
        mem=np.tile(np.array(mem_row, dtype=np.int64), (L, 1)),
        budget=budget,
        omega=omega,
        theta=float(theta),
        global_batch=workload.global_batch, eta=eta, xi=xi, gen_len=n,
        comm_pre=comm_pre, comm_dec=comm_dec,
        device_names=tuple(dev.name for dev in devices),
        capacity=capacity,
    )


def group_layers(inst: IlpInstance, g: int) -> IlpInstance:
    """Merge runs of ``g`` consecutive layers into one decision unit."""
    if g < 1:
        raise ValueError("group size must be >= 1")
    if g == 1:
        return inst
    L = inst.num_layers
    bounds = [(start, min(start + g, L)) for start in range(0, L, g)]

    def fold(arr):
        return np.stack([arr[a:b].sum(axis=0) for a, b in bounds])

    sizes = tuple(sum(inst.group_sizes[a:b]) for a, b in bounds)
    return replace(inst, lat_pre=fold(inst.lat_pre), lat_dec=fold(inst.lat_dec),
                   mem=fold(inst.mem), omega=fold(inst.omega), group_sizes=sizes)


def expand_candidate(grouped: IlpInstance, cand: PlanCandidate) -> Tuple[tuple, tuple]:
    """Map a grouped candidate back to per-layer stages and bits."""
    offsets = np.concatenate([[0], np.cumsum(grouped.group_sizes)]).astype(int)
    stages = tuple((int(offsets[a]), int(offsets[b])) for a, b in cand.stages)
    bits = []
    for size, b in zip(grouped.group_sizes, cand.bits):
        bits.extend([b] * size)
    return stages, tuple(bits)


def zero_latency(inst: IlpInstance) -> IlpInstance:
    """The instance with its latency objective removed (quality-only)."""
    allowed = np.where(np.isfinite(inst.lat_pre) & np.isfinite(inst.lat_dec), 0.0, np.inf)
    return replace(inst, lat_pre=allowed, lat_dec=allowed,
                   comm_pre=np.zeros(inst.num_devices), comm_dec=np.zeros(inst.num_devices))


def candidate_key(cand: PlanCandidate, rel_tol: float = 1e-12):
    """Sort key used for deterministic tie-breaking: objective, then larger bit sum."""
    return (cand.objective.total, -cand.bit_sum)


def better(a: PlanCandidate, b: Optional[PlanCandidate], rel_tol: float = 1e-12) -> bool:
    """True when ``a`` should replace incumbent ``b``."""
    if b is None:
        return True
    x, y = a.objective.total, b.objective.total
    tol = rel_tol * max(1.0, abs(x), abs(y))
    if x < y - tol:
        return True
    if x > y + tol:
        return False
    return a.bit_sum > b.bit_sum
