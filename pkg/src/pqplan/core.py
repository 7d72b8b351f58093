"""Domain types, config parsing and model/device presets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

FORMAT_VERSION = 1

DEFAULT_BITS = (3, 4, 8, 16)
REFERENCE_BIT = 16
GiB = 1024 ** 3


class PlanningError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PlanningError, ValueError):
    """Malformed or invalid input document."""


class PlanError(PlanningError, ValueError):
    """A plan violates a structural invariant."""


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden_dim: int
    ffn_dim: int
    num_heads: int
    vocab_size: int
    max_pos: int
    embed_dim: int
    pos_embed_dim: int
    norm_kind: str = "standard"

    def __post_init__(self):
        for attr in ("num_layers", "hidden_dim", "ffn_dim", "num_heads",
                     "vocab_size", "max_pos", "embed_dim", "pos_embed_dim"):
            value = getattr(self, attr)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"model.{attr} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.norm_kind not in ("standard", "rms"):
            raise ConfigError(f"norm_kind must be 'standard' or 'rms', got {self.norm_kind!r}")


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    mem_capacity: int
    link_bandwidth: float
    supported_bits: frozenset = frozenset(DEFAULT_BITS)

    def __post_init__(self):
        if not self.name:
            raise ConfigError("device name must be non-empty")
        if not isinstance(self.mem_capacity, int) or self.mem_capacity <= 0:
            raise ConfigError(f"device {self.name}: mem_bytes must be a positive integer")
        if not (self.link_bandwidth > 0 and math.isfinite(self.link_bandwidth)):
            raise ConfigError(f"device {self.name}: link bandwidth must be positive")
        object.__setattr__(self, "supported_bits", frozenset(int(b) for b in self.supported_bits))
        if not self.supported_bits:
            raise ConfigError(f"device {self.name}: supported_bits is empty")
        unknown = self.supported_bits - set(DEFAULT_BITS)
        if unknown:
            raise ConfigError(f"device {self.name}: unknown bitwidth(s) {sorted(unknown)}")

    @property
    def kind(self) -> tuple:
        """Devices with equal kinds are interchangeable in a pipeline."""
        return (self.name, self.mem_capacity, self.link_bandwidth, tuple(sorted(self.supported_bits)))


@dataclass(frozen=True)
class ClusterSpec:
    devices: tuple
    pairwise_bandwidth: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.devices:
            raise ConfigError("cluster must contain at least one device")
        if self.pairwise_bandwidth is not None:
            n = len(self.devices)
            matrix = tuple(tuple(float(x) for x in row) for row in self.pairwise_bandwidth)
            if len(matrix) != n or any(len(row) != n for row in matrix):
                raise ConfigError(f"pairwise_bandwidth must be {n}x{n}")
            for a in range(n):
                for b in range(n):
                    if a != b and not matrix[a][b] > 0:
                        raise ConfigError("pairwise_bandwidth entries must be positive")
                    if matrix[a][b] != matrix[b][a]:
                        raise ConfigError("pairwise_bandwidth must be symmetric")
            object.__setattr__(self, "pairwise_bandwidth", matrix)

    def __len__(self):
        return len(self.devices)

    def bandwidth(self, src: int, dst: int) -> float:
        """Bytes/s from device ``src`` to its pipeline successor ``dst``."""
        if self.pairwise_bandwidth is not None and src != dst:
            return self.pairwise_bandwidth[src][dst]
        return self.devices[src].link_bandwidth


@dataclass(frozen=True)
class Workload:
    global_batch: int
    prompt_len: int
    gen_len: int

    def __post_init__(self):
        for attr in ("global_batch", "prompt_len", "gen_len"):
            value = getattr(self, attr)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"workload.{attr} must be an integer >= 1, got {value!r}")


@dataclass(frozen=True)
class BitwidthSet:
    bits: tuple = DEFAULT_BITS

    def __post_init__(self):
        bits = tuple(sorted({int(b) for b in self.bits}))
        if not bits:
            raise ConfigError("bit set must be non-empty")
        if REFERENCE_BIT not in bits:
            raise ConfigError("bit set must contain 16 (the unquantized reference)")
        unknown = set(bits) - set(DEFAULT_BITS)
        if unknown:
            raise ConfigError(f"unknown bitwidth(s) {sorted(unknown)}")
        object.__setattr__(self, "bits", bits)

    def __iter__(self):
        return iter(self.bits)

    def __len__(self):
        return len(self.bits)

    def __contains__(self, bit):
        return bit in self.bits


@dataclass(frozen=True)
class ObjectiveBreakdown:
    t_max_pre: float
    t_max_dec: float
    t_pre_total: float
    t_dec_total: float
    omega_sum: float
    theta: float
    total: float
    pre_bubbles: int = 0
    dec_bubbles: int = 0

    @property
    def latency(self) -> float:
        return (self.pre_bubbles * self.t_max_pre + self.dec_bubbles * self.t_max_dec
                + self.t_pre_total + self.t_dec_total)

    def recompose(self) -> float:
        return self.latency + self.theta * self.omega_sum

    def to_dict(self) -> dict:
        return {
            "t_max_pre": self.t_max_pre, "t_max_dec": self.t_max_dec,
            "t_pre_total": self.t_pre_total, "t_dec_total": self.t_dec_total,
            "omega_sum": self.omega_sum, "theta": self.theta, "total": self.total,
            "pre_bubbles": self.pre_bubbles, "dec_bubbles": self.dec_bubbles,
            "latency": self.latency,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ObjectiveBreakdown":
        return cls(**{k: d[k] for k in (
            "t_max_pre", "t_max_dec", "t_pre_total", "t_dec_total",
            "omega_sum", "theta", "total", "pre_bubbles", "dec_bubbles")})


@dataclass(frozen=True)
class Plan:
    device_order: tuple
    partition: tuple
    bits: tuple
    eta: int
    xi: int
    objective: Optional[ObjectiveBreakdown] = None
    status: str = "optimal"

    @property
    def num_stages(self) -> int:
        return len(self.device_order)

    def stage_bits(self, stage: int) -> tuple:
        start, end = self.partition[stage]
        return self.bits[start:end]


def validate_plan(plan: Plan, num_layers: int, bits: Sequence[int], global_batch: int,
                  num_devices: Optional[int] = None) -> None:
    """Raise PlanError unless ``plan`` is a contiguous, complete, in-range plan."""
    order = tuple(plan.device_order)
    if not order:
        raise PlanError("plan has no stages")
    if len(set(order)) != len(order):
        raise PlanError(f"device_order repeats a device: {order}")
    if num_devices is not None and any(not 0 <= d < num_devices for d in order):
        raise PlanError(f"device_order references unknown device: {order}")
    if len(plan.partition) != len(order):
        raise PlanError("partition must have one layer range per stage")
    expected_start = 0
    for stage, rng in enumerate(plan.partition):
        start, end = rng
        if start != expected_start:
            raise PlanError(f"stage {stage} starts at layer {start}, expected {expected_start}")
        if end <= start:
            raise PlanError(f"stage {stage} has an empty layer range [{start}, {end})")
        expected_start = end
    if expected_start != num_layers:
        raise PlanError(f"partition covers [0, {expected_start}) but model has {num_layers} layers")
    if len(plan.bits) != num_layers:
        raise PlanError(f"plan assigns {len(plan.bits)} bitwidths for {num_layers} layers")
    allowed = set(bits)
    bad = sorted({b for b in plan.bits if b not in allowed})
    if bad:
        raise PlanError(f"plan uses bitwidths outside the bit set: {bad}")
    if not 1 <= plan.eta <= plan.xi <= global_batch:
        raise PlanError(f"micro-batch sizes violate 1 <= eta <= xi <= B: "
                        f"eta={plan.eta}, xi={plan.xi}, B={global_batch}")


# Published architecture values (HF config.json of each checkpoint). OPT's learned
# position table carries a 2-row offset, hence 2050.
MODEL_PRESETS: dict = {
    "tiny-test": dict(num_layers=4, hidden_dim=8, ffn_dim=32, num_heads=2, vocab_size=16,
                      max_pos=16, embed_dim=8, pos_embed_dim=8),
    "opt-125m": dict(num_layers=12, hidden_dim=768, ffn_dim=3072, num_heads=12,
                     vocab_size=50272, max_pos=2050, embed_dim=768, pos_embed_dim=768),
    "opt-350m": dict(num_layers=24, hidden_dim=1024, ffn_dim=4096, num_heads=16,
                     vocab_size=50272, max_pos=2050, embed_dim=512, pos_embed_dim=1024),
    "opt-1.3b": dict(num_layers=24, hidden_dim=2048, ffn_dim=8192, num_heads=32,
                     vocab_size=50272, max_pos=2050, embed_dim=2048, pos_embed_dim=2048),
    "opt-13b": dict(num_layers=40, hidden_dim=5120, ffn_dim=20480, num_heads=40,
                    vocab_size=50272, max_pos=2050, embed_dim=5120, pos_embed_dim=5120),
    "opt-30b": dict(num_layers=48, hidden_dim=7168, ffn_dim=28672, num_heads=56,
                    vocab_size=50272, max_pos=2050, embed_dim=7168, pos_embed_dim=7168),
    "opt-66b": dict(num_layers=64, hidden_dim=9216, ffn_dim=36864, num_heads=72,
                    vocab_size=50272, max_pos=2050, embed_dim=9216, pos_embed_dim=9216),
    # BLOOM uses ALiBi; max_pos is the training sequence length.
    "bloom-560m": dict(num_layers=24, hidden_dim=1024, ffn_dim=4096, num_heads=16,
                       vocab_size=250880, max_pos=2048, embed_dim=1024, pos_embed_dim=1024),
    "bloom-1b7": dict(num_layers=24, hidden_dim=2048, ffn_dim=8192, num_heads=16,
                      vocab_size=250880, max_pos=2048, embed_dim=2048, pos_embed_dim=2048),
    "bloom-176b": dict(num_layers=70, hidden_dim=14336, ffn_dim=57344, num_heads=112,
                       vocab_size=250880, max_pos=2048, embed_dim=14336, pos_embed_dim=14336),
}


def model_preset(name: str) -> ModelSpec:
    key = name.strip().lower()
    if key not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; known: {', '.join(sorted(MODEL_PRESETS))}")
    return ModelSpec(name=key, **MODEL_PRESETS[key])


@dataclass(frozen=True)
class DeviceProfile:
    """Nominal hardware figures; memory feeds DeviceSpec, the rest feeds synthetic profiles."""
    mem_bytes: int
    fp16_tflops: float
    mem_bw_gbs: float


DEVICE_PRESETS: dict = {
    "T4-16G": DeviceProfile(16 * GiB, 65.0, 320.0),
    "P100-12G": DeviceProfile(12 * GiB, 18.7, 549.0),
    "V100-32G": DeviceProfile(32 * GiB, 125.0, 900.0),
    "A100-40G": DeviceProfile(40 * GiB, 312.0, 1555.0),
    "A100-80G": DeviceProfile(80 * GiB, 312.0, 2039.0),
    "A800-80G": DeviceProfile(80 * GiB, 312.0, 2039.0),
}

DEFAULT_LINK_BW = 12.5e9  # 100 Gbps Ethernet


def device_preset(name: str, link_bandwidth: float = DEFAULT_LINK_BW,
                  supported_bits=DEFAULT_BITS) -> DeviceSpec:
    if name not in DEVICE_PRESETS:
        raise ConfigError(f"unknown device type {name!r}; known: {', '.join(sorted(DEVICE_PRESETS))}")
    return DeviceSpec(name, DEVICE_PRESETS[name].mem_bytes, float(link_bandwidth),
                      frozenset(supported_bits))


def cluster_from_counts(names: Sequence[str], counts: Sequence[int],
                        link_bandwidth: float = DEFAULT_LINK_BW) -> ClusterSpec:
    if len(names) != len(counts):
        raise ConfigError("--device-names and --device-numbers must have equal length")
    devices = []
    for name, count in zip(names, counts):
        if int(count) < 1:
            raise ConfigError(f"device count for {name} must be >= 1")
        devices.extend(device_preset(name, link_bandwidth) for _ in range(int(count)))
    return ClusterSpec(tuple(devices))


# ---------------------------------------------------------------------------
# JSON documents

def _load(text_or_obj) -> Any:
    if isinstance(text_or_obj, (str, bytes)):
        try:
            return json.loads(text_or_obj)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON document: {exc}") from None
    return text_or_obj


def _require(d: Mapping, key: str, where: str):
    if not isinstance(d, Mapping) or key not in d:
        raise ConfigError(f"missing field {where}.{key}")
    return d[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{where} must be an integer")
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def parse_cluster(text) -> ClusterSpec:
    """Parse a cluster section (or a whole config document holding one)."""
    doc = _load(text)
    if isinstance(doc, Mapping) and "cluster" in doc:
        doc = doc["cluster"]
    raw_devices = _require(doc, "devices", "cluster")
    if not isinstance(raw_devices, list) or not raw_devices:
        raise ConfigError("cluster.devices must be a non-empty list")
    devices = []
    for k, entry in enumerate(raw_devices):
        where = f"cluster.devices[{k}]"
        name = _require(entry, "name", where)
        mem = _as_int(_require(entry, "mem_bytes", where), f"{where}.mem_bytes")
        bw = _require(entry, "link_bw_bytes_per_s", where)
        if not isinstance(bw, (int, float)) or isinstance(bw, bool):
            raise ConfigError(f"{where}.link_bw_bytes_per_s must be a number")
        bits = entry.get("supported_bits", DEFAULT_BITS)
        count = _as_int(entry.get("count", 1), f"{where}.count")
        if count < 1:
            raise ConfigError(f"{where}.count must be >= 1")
        try:
            spec = DeviceSpec(str(name), mem, float(bw), frozenset(bits))
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        devices.extend([spec] * count)
    return ClusterSpec(tuple(devices), doc.get("pairwise_bandwidth"))


def serialize_cluster(cluster: ClusterSpec) -> str:
    doc: dict = {"devices": [
        {"name": d.name, "mem_bytes": d.mem_capacity, "link_bw_bytes_per_s": d.link_bandwidth,
         "supported_bits": sorted(d.supported_bits)}
        for d in cluster.devices]}
    if cluster.pairwise_bandwidth is not None:
        doc["pairwise_bandwidth"] = [list(row) for row in cluster.pairwise_bandwidth]
    return json.dumps(doc, indent=2)


def parse_model(obj) -> ModelSpec:
    if isinstance(obj, str):
        return model_preset(obj)
    if not isinstance(obj, Mapping):
        raise ConfigError("model must be a preset name or an object")
    if "preset" in obj:
        return model_preset(obj["preset"])
    fields = ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "vocab_size",
              "max_pos", "embed_dim", "pos_embed_dim")
    kwargs = {f: _as_int(_require(obj, f, "model"), f"model.{f}") for f in fields}
    return ModelSpec(name=str(obj.get("name", "custom")),
                     norm_kind=str(obj.get("norm_kind", "standard")), **kwargs)


def model_to_dict(model: ModelSpec) -> dict:
    return {k: getattr(model, k) for k in model.__dataclass_fields__}


def parse_workload(obj) -> Workload:
    return Workload(_as_int(_require(obj, "B", "workload"), "workload.B"),
                    _as_int(_require(obj, "s", "workload"), "workload.s"),
                    _as_int(_require(obj, "n", "workload"), "workload.n"))


@dataclass(frozen=True)
class PlannerInputs:
    model: ModelSpec
    cluster: ClusterSpec
    workload: Workload
    bits: BitwidthSet = field(default_factory=BitwidthSet)


def parse_config(text) -> PlannerInputs:
    doc = _load(text)
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a JSON object")
    return PlannerInputs(
        model=parse_model(_require(doc, "model", "config")),
        cluster=parse_cluster(_require(doc, "cluster", "config")),
        workload=parse_workload(_require(doc, "workload", "config")),
        bits=BitwidthSet(tuple(doc.get("bits", DEFAULT_BITS))),
    )


def serialize_config(inputs: PlannerInputs) -> str:
    return json.dumps({
        "format_version": FORMAT_VERSION,
        "model": model_to_dict(inputs.model),
        "cluster": json.loads(serialize_cluster(inputs.cluster)),
        "workload": {"B": inputs.workload.global_batch, "s": inputs.workload.prompt_len,
                     "n": inputs.workload.gen_len},
        "bits": list(inputs.bits.bits),
    }, indent=2)


def plan_to_dict(plan: Plan, inputs: Optional[PlannerInputs] = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "device_order": list(plan.device_order),
        "partition": [list(r) for r in plan.partition],
        "bits": list(plan.bits),
        "eta": plan.eta,
        "xi": plan.xi,
        "status": plan.status,
        "objective": plan.objective.to_dict() if plan.objective is not None else None,
    }
    if inputs is not None:
        doc["devices"] = [inputs.cluster.devices[i].name for i in plan.device_order]
        doc["inputs"] = json.loads(serialize_config(inputs))
    return doc


def serialize_plan(plan: Plan, inputs: Optional[PlannerInputs] = None) -> str:
    return json.dumps(plan_to_dict(plan, inputs), indent=2) + "\n"


def parse_plan(text) -> tuple:
    """Plan document -> (Plan, PlannerInputs or None)."""
    doc = _load(text)
    if not isinstance(doc, Mapping):
        raise ConfigError("plan document must be a JSON object")
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported plan format_version {version!r}")
    try:
        obj = doc.get("objective")
        plan = Plan(
            device_order=tuple(int(i) for i in _require(doc, "device_order", "plan")),
            partition=tuple((int(a), int(b)) for a, b in _require(doc, "partition", "plan")),
            bits=tuple(int(b) for b in _require(doc, "bits", "plan")),
            eta=_as_int(_require(doc, "eta", "plan"), "plan.eta"),
            xi=_as_int(_require(doc, "xi", "plan"), "plan.xi"),
            objective=ObjectiveBreakdown.from_dict(obj) if obj else None,
            status=str(doc.get("status", "optimal")),
        )
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed plan document: {exc}") from None
    inputs = parse_config(doc["inputs"]) if "inputs" in doc else None
    if inputs is not None:
        validate_plan(plan, inputs.model.num_layers, inputs.bits.bits,
                      inputs.workload.global_batch, len(inputs.cluster))
    return plan, inputs
