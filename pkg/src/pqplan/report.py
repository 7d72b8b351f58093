"""Report tables (CSV) and figures (PNG) for plans and their simulations."""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from typing import Dict, List, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .core import GiB, Plan, PlannerInputs
from .latcost import LatencyModel
from .memcost import shard_mem_bytes
from .pipesim import SimReport, StageCost, analytic_latency, simulate_plan, throughput

SUMMARY_COLUMNS = ("plan", "status", "eta", "xi", "objective", "latency_term", "omega_sum",
                   "analytic_latency_s", "simulated_makespan_s", "gap_s", "throughput_tok_s",
                   "bubble_fraction")
STAGE_COLUMNS = ("plan", "stage", "device", "first_layer", "last_layer", "num_layers", "bits",
                 "prefill_s", "decode_s", "mem_used_bytes", "mem_capacity_bytes",
                 "mem_headroom_bytes")
LAYER_COLUMNS = ("plan", "layer", "stage", "device", "bit")

_PNG_META = {"Software": None}


def bits_summary(bits: Sequence[int]) -> str:
    counts = Counter(bits)
    return " ".join(f"{b}x{counts[b]}" for b in sorted(counts, reverse=True))


def stage_rows(name: str, plan: Plan, inputs: PlannerInputs, costs: StageCost) -> List[dict]:
    rows = []
    w = inputs.workload
    for j, dev_idx in enumerate(plan.device_order):
        dev = inputs.cluster.devices[dev_idx]
        start, end = plan.partition[j]
        mem = shard_mem_bytes(inputs.model, plan.stage_bits(j), w, j == 0, plan.eta, plan.xi)
        rows.append({
            "plan": name, "stage": j, "device": dev.name, "first_layer": start,
            "last_layer": end - 1, "num_layers": end - start,
            "bits": bits_summary(plan.stage_bits(j)),
            "prefill_s": costs.pre[j], "decode_s": costs.dec[j],
            "mem_used_bytes": mem.total, "mem_capacity_bytes": dev.mem_capacity,
            "mem_headroom_bytes": dev.mem_capacity - mem.total,
        })
    return rows


def summary_row(name: str, plan: Plan, inputs: PlannerInputs, sim: SimReport,
                costs: StageCost) -> dict:
    w = inputs.workload
    analytic = analytic_latency(costs, w.global_batch, plan.eta, plan.xi, w.gen_len)
    obj = plan.objective
    return {
        "plan": name, "status": plan.status, "eta": plan.eta, "xi": plan.xi,
        "objective": obj.total if obj else "", "latency_term": obj.latency if obj else "",
        "omega_sum": obj.omega_sum if obj else "",
        "analytic_latency_s": analytic, "simulated_makespan_s": sim.makespan,
        "gap_s": sim.makespan - analytic,
        "throughput_tok_s": throughput(w, sim.makespan),
        "bubble_fraction": sim.bubble_fraction,
    }


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in columns)])
    return buf.getvalue()


def _save(fig: Figure, path: str) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=110, metadata=_PNG_META)


def render_timeline(sim: SimReport, device_names: Sequence[str], path: str, title: str = "") -> None:
    N = len(device_names)
    fig = Figure(figsize=(10, 1.0 + 0.6 * N))
    ax = fig.add_subplot(1, 1, 1)
    colors = {"prefill": "tab:blue", "decode": "tab:orange"}
    for kind in ("prefill", "decode"):
        for j in range(N):
            bars = [(r[4], r[5] - r[4]) for r in sim.timeline if r[0] == j and r[1] == kind]
            if bars:
                ax.broken_barh(bars, (j - 0.4, 0.8), facecolors=colors[kind],
                               label=kind if j == 0 else None)
    ax.set_yticks(range(N))
    ax.set_yticklabels([f"{j}: {d}" for j, d in enumerate(device_names)])
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    ax.set_title(title or f"stage timeline, makespan {sim.makespan:.3f} s")
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def render_bits(plans: Dict[str, Plan], path: str) -> None:
    fig = Figure(figsize=(10, 1.0 + 0.8 * len(plans)))
    ax = fig.add_subplot(1, 1, 1)
    for row, (name, plan) in enumerate(plans.items()):
        ax.scatter(range(len(plan.bits)), [row] * len(plan.bits), c=plan.bits, cmap="viridis",
                   vmin=3, vmax=16, marker="s", s=40)
        for start, _ in plan.partition[1:]:
            ax.axvline(start - 0.5, ymin=0, ymax=1, color="grey", lw=0.5)
    ax.set_yticks(range(len(plans)))
    ax.set_yticklabels(list(plans))
    ax.set_xlabel("layer")
    ax.set_title("per-layer bitwidth (dark = low)")
    fig.tight_layout()
    _save(fig, path)


def render_memory(rows: Sequence[dict], path: str) -> None:
    fig = Figure(figsize=(8, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    labels = [f"{r['plan']}:{r['stage']}" for r in rows]
    used = [r["mem_used_bytes"] / GiB for r in rows]
    cap = [r["mem_capacity_bytes"] / GiB for r in rows]
    ax.bar(labels, cap, color="lightgrey", label="capacity")
    ax.bar(labels, used, color="tab:green", label="used")
    ax.set_ylabel("GiB")
    ax.tick_params(axis="x", labelrotation=60, labelsize="small")
    ax.legend(fontsize="small")
    ax.set_title("device memory")
    fig.tight_layout()
    _save(fig, path)


def write_report(out_dir: str, plans: Dict[str, Plan], inputs: PlannerInputs,
                 latency: LatencyModel, linear_decode: bool = False) -> List[str]:
    """Simulate every plan and write CSV tables and PNG figures; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    summaries, stages, layers = [], [], []
    written = []
    for name, plan in plans.items():
        sim, costs = simulate_plan(plan, inputs.model, inputs.cluster, inputs.workload, latency,
                                   linear_decode)
        summaries.append(summary_row(name, plan, inputs, sim, costs))
        stages.extend(stage_rows(name, plan, inputs, costs))
        names = [inputs.cluster.devices[i].name for i in plan.device_order]
        for j, (start, end) in enumerate(plan.partition):
            for i in range(start, end):
                layers.append({"plan": name, "layer": i, "stage": j, "device": names[j],
                               "bit": plan.bits[i]})
        path = os.path.join(out_dir, f"timeline_{name}.csv")
        with open(path, "w") as fh:
            fh.write(sim.timeline_csv())
        written.append(path)
        path = os.path.join(out_dir, f"timeline_{name}.png")
        render_timeline(sim, names, path, f"{name}: makespan {sim.makespan:.3f} s")
        written.append(path)
    for fname, rows, cols in (("summary.csv", summaries, SUMMARY_COLUMNS),
                              ("stages.csv", stages, STAGE_COLUMNS),
                              ("layers.csv", layers, LAYER_COLUMNS)):
        path = os.path.join(out_dir, fname)
        with open(path, "w") as fh:
            fh.write(to_csv(rows, cols))
        written.append(path)
    path = os.path.join(out_dir, "bits.png")
    render_bits(plans, path)
    written.append(path)
    path = os.path.join(out_dir, "memory.png")
    render_memory(stages, path)
    written.append(path)
    return written
