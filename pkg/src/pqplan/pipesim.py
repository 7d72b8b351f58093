"""Discrete-event simulation of two-phase pipelined generation.

Prefill micro-batches of size eta flow through the stages; once every prefill
batch covering a decode group's sequences has left the last stage, the group
runs its n-1 decode passes, one token at a time. Each inter-stage link carries
one transfer at a time and overlaps with compute. Stages serve ready work FIFO.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass
from typing import List, Tuple

from .core import ClusterSpec, ModelSpec, Plan, Workload
from .latcost import (LatencyModel, comm_bytes_decode, comm_bytes_prefill, decode_slope,
                      shard_latency)

TIMELINE_COLUMNS = ("stage", "kind", "unit", "token", "start", "end")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class StageCost:
    """Per-stage prefill and per-token decode compute, plus outgoing link times.

    ``comm_*[j]`` is the transfer time on the link from stage j to stage j+1
    (the last entry is the loop back to stage 0). ``dec_slope`` optionally makes
    decode cost linear in the token index around its t = n/2 value.
    """
    pre: tuple
    dec: tuple
    comm_pre: tuple = ()
    comm_dec: tuple = ()
    dec_slope: tuple = ()

    def __post_init__(self):
        N = len(self.pre)
        for name in ("pre", "dec", "comm_pre", "comm_dec", "dec_slope"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if not self.comm_pre:
            object.__setattr__(self, "comm_pre", (0.0,) * N)
        if not self.comm_dec:
            object.__setattr__(self, "comm_dec", (0.0,) * N)
        if N == 0 or any(len(getattr(self, f)) != N for f in ("dec", "comm_pre", "comm_dec")):
            raise ValueError("stage cost arrays must be nonempty and equally long")
        if self.dec_slope and len(self.dec_slope) != N:
            raise ValueError("dec_slope must have one entry per stage")
        if any(x < 0 for f in ("pre", "dec", "comm_pre", "comm_dec") for x in getattr(self, f)):
            raise ValueError("stage costs must be non-negative")

    @property
    def num_stages(self) -> int:
        return len(self.pre)


@dataclass(frozen=True)
class Schedule:
    global_batch: int
    eta: int
    xi: int
    prefill_sizes: tuple
    decode_sizes: tuple
    groups: tuple   # per decode group: indices of the prefill batches it waits for


def microbatch_schedule(B: int, eta: int, xi: int) -> Schedule:
    if not 1 <= eta <= xi <= B:
        raise ValueError(f"need 1 <= eta <= xi <= B, got eta={eta}, xi={xi}, B={B}")
    pre = tuple(min(eta, B - p * eta) for p in range(_ceil_div(B, eta)))
    dec = tuple(min(xi, B - g * xi) for g in range(_ceil_div(B, xi)))
    groups = []
    for g in range(len(dec)):
        lo, hi = g * xi, g * xi + dec[g]
        # every prefill batch holding one of the group's sequences
        groups.append(tuple(p for p in range(len(pre)) if p * eta < hi and p * eta + pre[p] > lo))
    return Schedule(B, eta, xi, pre, dec, tuple(groups))


@dataclass(frozen=True)
class SimReport:
    makespan: float
    busy: tuple
    bubble_fraction: float
    timeline: tuple   # (stage, kind, unit, token, start, end), ordered by (start, stage)

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TIMELINE_COLUMNS)
        for stage, kind, unit, token, start, end in self.timeline:
            writer.writerow([stage, kind, unit, token, repr(start), repr(end)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"makespan": self.makespan, "busy": list(self.busy),
                "bubble_fraction": self.bubble_fraction}


_DONE, _ARRIVE = 0, 1


def simulate(costs: StageCost, schedule: Schedule, n: int, linear_decode: bool = False) -> SimReport:
    """Event-driven makespan of generating ``n`` tokens for the whole batch."""
    if n < 1:
        raise ValueError("n must be >= 1")
    N = costs.num_stages
    if linear_decode and not costs.dec_slope:
        raise ValueError("linear decode mode needs dec_slope")

    def compute_time(stage: int, kind: str, token: int) -> float:
        if kind == "prefill":
            return costs.pre[stage]
        if linear_decode:
            return max(costs.dec[stage] + costs.dec_slope[stage] * (token - n / 2), 0.0)
        return costs.dec[stage]

    events: list = []
    counter = [0]

    def push(t, kind, payload):
        counter[0] += 1
        heapq.heappush(events, (t, kind, counter[0], payload))

    queues: List[list] = [[] for _ in range(N)]
    busy_until = [False] * N
    link_free = [0.0] * N
    busy = [0.0] * N
    timeline = []
    unit_seq = [0]

    def new_unit(kind, idx, token):
        unit_seq[0] += 1
        return (kind, idx, token, unit_seq[0])

    def try_start(stage, now):
        if busy_until[stage] or not queues[stage]:
            return
        arrival, seq, unit = heapq.heappop(queues[stage])
        kind, idx, token, _ = unit
        dt = compute_time(stage, kind, token)
        busy_until[stage] = True
        busy[stage] += dt
        timeline.append((stage, kind, idx, token, now, now + dt))
        push(now + dt, _DONE, (stage, unit))

    def send(stage, unit, now):
        """Ship ``unit``'s output from ``stage`` to the next stage (wrapping to 0)."""
        dst = (stage + 1) % N
        if N == 1:
            push(now, _ARRIVE, (dst, unit))
            return
        comm = costs.comm_pre[stage] if unit[0] == "prefill" else costs.comm_dec[stage]
        start = max(now, link_free[stage])
        link_free[stage] = start + comm
        push(start + comm, _ARRIVE, (dst, unit))

    prefill_left = [len(members) for members in schedule.groups]
    groups_of = [[g for g, members in enumerate(schedule.groups) if p in members]
                 for p in range(len(schedule.prefill_sizes))]
    for p in range(len(schedule.prefill_sizes)):
        push(0.0, _ARRIVE, (0, new_unit("prefill", p, 0)))
    makespan = 0.0
    while events:
        now, kind, _, payload = heapq.heappop(events)
        stage, unit = payload
        if kind == _ARRIVE:
            heapq.heappush(queues[stage], (now, unit[3], unit))
            try_start(stage, now)
            continue
        busy_until[stage] = False
        ukind, idx, token, _ = unit
        if stage < N - 1:
            send(stage, unit, now)
        else:
            makespan = max(makespan, now)
            if ukind == "prefill":
                for g in groups_of[idx]:
                    prefill_left[g] -= 1
                    if prefill_left[g] == 0 and n > 1:
                        send(stage, new_unit("decode", g, 1), now)
            elif token < n - 1:
                send(stage, new_unit("decode", idx, token + 1), now)
        try_start(stage, now)
    total_busy = sum(busy)
    bubble = 1.0 - total_busy / (N * makespan) if makespan > 0 else 0.0
    timeline.sort(key=lambda r: (r[4], r[0]))
    return SimReport(makespan, tuple(busy), float(min(max(bubble, 0.0), 1.0)), tuple(timeline))


def analytic_latency(costs: StageCost, B: int, eta: int, xi: int, n: int) -> float:
    """The planner's closed-form latency for the same stage costs."""
    t_max_pre = max(max(costs.pre), max(costs.comm_pre))
    t_max_dec = max(max(costs.dec), max(costs.comm_dec))
    pre_bubbles = _ceil_div(B, eta) - 1
    dec_bubbles = (_ceil_div(B, xi) - 1) * (n - 1)
    return (pre_bubbles * t_max_pre + dec_bubbles * t_max_dec
            + sum(costs.pre) + sum(costs.dec))


def plan_stage_costs(plan: Plan, model: ModelSpec, cluster: ClusterSpec, workload: Workload,
                     latency: LatencyModel) -> StageCost:
    """Stage costs of a plan under a latency model (decode at t = n/2)."""
    pre, dec, slope, cpre, cdec = [], [], [], [], []
    order = plan.device_order
    N = len(order)
    for j, dev_idx in enumerate(order):
        dev = cluster.devices[dev_idx]
        layer_bits = plan.stage_bits(j)
        pre.append(shard_latency(latency, dev, layer_bits, "prefill", workload, plan.eta))
        dec.append(shard_latency(latency, dev, layer_bits, "decode", workload, plan.xi))
        slope.append(sum(decode_slope(latency, dev.name, b, plan.xi) for b in layer_bits))
        if N > 1:
            bw = cluster.bandwidth(dev_idx, order[(j + 1) % N])
            cpre.append(comm_bytes_prefill(model.hidden_dim, plan.eta, workload.prompt_len) / bw)
            cdec.append(comm_bytes_decode(model.hidden_dim, plan.xi) / bw)
        else:
            cpre.append(0.0)
            cdec.append(0.0)
    return StageCost(tuple(pre), tuple(dec), tuple(cpre), tuple(cdec), tuple(slope))


def simulate_plan(plan: Plan, model: ModelSpec, cluster: ClusterSpec, workload: Workload,
                  latency: LatencyModel, linear_decode: bool = False) -> Tuple[SimReport, StageCost]:
    costs = plan_stage_costs(plan, model, cluster, workload, latency)
    schedule = microbatch_schedule(workload.global_batch, plan.eta, plan.xi)
    return simulate(costs, schedule, workload.gen_len, linear_decode), costs


def throughput(workload: Workload, makespan: float) -> float:
    """Generated tokens per second for the whole batch."""
    return workload.global_batch * workload.gen_len / makespan if makespan > 0 else float("inf")
