"""Per-(device, bitwidth, phase) linear latency models fitted from profiled samples.

Prefill time is regressed on compute-shaped features ``[1, v, s, v*s, v*s^2]``;
decode time on memory-traffic features ``[1, v, v*(t+s), t+s]``. Samples are
per single decoder layer; shard latency is the sum over its layers.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .core import FORMAT_VERSION, ConfigError, DeviceSpec, PlanningError, Workload

PHASES = ("prefill", "decode")
FEATURES = {
    "prefill": ("1", "v", "s", "v*s", "v*s^2"),
    "decode": ("1", "v", "v*(t+s)", "t+s"),
}
CSV_COLUMNS = ("device", "bit", "phase", "v", "s", "t", "latency_s")


class RankDeficientError(PlanningError):
    pass


class UnknownGroupError(PlanningError, KeyError):
    pass


@dataclass(frozen=True)
class ProfileSample:
    device: str
    bit: int
    phase: str
    v: int
    s: int
    t: int
    latency: float

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if not self.latency > 0:
            raise ConfigError(f"latency must be positive, got {self.latency!r}")
        if self.phase == "prefill" and self.t != 0:
            raise ConfigError("prefill samples must have t = 0")
        if self.v < 1 or self.s < 1 or self.t < 0:
            raise ConfigError("v, s must be >= 1 and t >= 0")


def features(phase: str, v, s, t=0) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    s = np.asarray(s, dtype=float)
    if phase == "prefill":
        cols = [np.ones_like(v * s), v * np.ones_like(s), s * np.ones_like(v), v * s, v * s * s]
    elif phase == "decode":
        ctx = np.asarray(t, dtype=float) + s
        cols = [np.ones_like(v * ctx), v * np.ones_like(ctx), v * ctx, ctx * np.ones_like(v)]
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def ingest_profile(document: str) -> List[ProfileSample]:
    """Parse profile CSV text; samples sharing a key are averaged."""
    reader = csv.DictReader(io.StringIO(document))
    if reader.fieldnames is None or set(CSV_COLUMNS) - set(reader.fieldnames):
        raise ConfigError(f"profile CSV must have columns {','.join(CSV_COLUMNS)}")
    acc: Dict[tuple, List[float]] = defaultdict(list)
    for lineno, row in enumerate(reader, start=2):
        try:
            key = (row["device"].strip(), int(row["bit"]), row["phase"].strip(),
                   int(row["v"]), int(row["s"]), int(row["t"]))
            latency = float(row["latency_s"])
        except (TypeError, ValueError, AttributeError):
            raise ConfigError(f"profile CSV line {lineno}: malformed row {row!r}") from None
        if not latency > 0:
            raise ConfigError(f"profile CSV line {lineno}: latency must be positive")
        acc[key].append(latency)
    return [ProfileSample(*key, latency=float(np.mean(vals))) for key, vals in sorted(acc.items())]


def samples_to_csv(samples: Iterable[ProfileSample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for x in samples:
        writer.writerow([x.device, x.bit, x.phase, x.v, x.s, x.t, repr(float(x.latency))])
    return buf.getvalue()


@dataclass(frozen=True)
class GroupFit:
    coef: Tuple[float, ...]
    n_samples: int
    rmse: float
    max_abs_residual: float
    max_rel_residual: float


GroupKey = Tuple[str, int, str]


@dataclass(frozen=True)
class LatencyModel:
    groups: Dict[GroupKey, GroupFit]

    def has(self, device: str, bit: int, phase: str) -> bool:
        return (device, bit, phase) in self.groups

    def coef(self, device: str, bit: int, phase: str) -> np.ndarray:
        try:
            return np.asarray(self.groups[(device, int(bit), phase)].coef)
        except KeyError:
            raise UnknownGroupError(
                f"no latency model for device={device!r} bit={bit} phase={phase}") from None

    def devices(self) -> List[str]:
        return sorted({k[0] for k in self.groups})

    def to_json(self) -> str:
        return json.dumps({
            "format_version": FORMAT_VERSION,
            "features": {p: list(f) for p, f in FEATURES.items()},
            "groups": [
                {"device": d, "bit": b, "phase": p, "coef": list(g.coef),
                 "n_samples": g.n_samples, "rmse": g.rmse,
                 "max_abs_residual": g.max_abs_residual,
                 "max_rel_residual": g.max_rel_residual}
                for (d, b, p), g in sorted(self.groups.items())
            ],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LatencyModel":
        try:
            doc = json.loads(text)
            groups = {}
            for g in doc["groups"]:
                coef = tuple(float(c) for c in g["coef"])
                if len(coef) != len(FEATURES[g["phase"]]):
                    raise ConfigError(f"wrong coefficient count for {g['phase']}")
                groups[(g["device"], int(g["bit"]), g["phase"])] = GroupFit(
                    coef, int(g["n_samples"]), float(g["rmse"]),
                    float(g["max_abs_residual"]), float(g["max_rel_residual"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed latency model document: {exc}") from None
        return cls(groups)


def _fit_group(key: GroupKey, rows: Sequence[ProfileSample]) -> GroupFit:
    phase = key[2]
    X = features(phase, [r.v for r in rows], [r.s for r in rows], [r.t for r in rows])
    y = np.array([r.latency for r in rows])
    k = X.shape[1]
    # column scaling keeps v*s^2 (~1e7) and the intercept on comparable footing
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    if len(rows) < k or np.linalg.matrix_rank(Xs) < k:
        raise RankDeficientError(
            f"rank-deficient design for device={key[0]!r} bit={key[1]} phase={phase}: "
            f"{len(rows)} distinct samples for {k} features")
    sol, *_ = np.linalg.lstsq(Xs, y, rcond=None)
    coef = sol / scale
    resid = y - X @ coef
    return GroupFit(
        coef=tuple(float(c) for c in coef),
        n_samples=len(rows),
        rmse=float(np.sqrt(np.mean(resid ** 2))),
        max_abs_residual=float(np.max(np.abs(resid))),
        max_rel_residual=float(np.max(np.abs(resid) / y)),
    )


def fit(samples: Iterable[ProfileSample]) -> LatencyModel:
    by_group: Dict[GroupKey, List[ProfileSample]] = defaultdict(list)
    for x in samples:
        by_group[(x.device, x.bit, x.phase)].append(x)
    if not by_group:
        raise ConfigError("no profile samples to fit")
    return LatencyModel({key: _fit_group(key, rows) for key, rows in sorted(by_group.items())})


def predict_prefill(model: LatencyModel, device: str, bit: int, v: int, s: int) -> float:
    value = float(features("prefill", v, s) @ model.coef(device, bit, "prefill"))
    return max(value, 0.0)


def predict_decode(model: LatencyModel, device: str, bit: int, v: int, s: int, t: float) -> float:
    value = float(features("decode", v, s, t) @ model.coef(device, bit, "decode"))
    return max(value, 0.0)


def predict(model: LatencyModel, sample: ProfileSample) -> float:
    if sample.phase == "prefill":
        return predict_prefill(model, sample.device, sample.bit, sample.v, sample.s)
    return predict_decode(model, sample.device, sample.bit, sample.v, sample.s, sample.t)


def relative_errors(model: LatencyModel, samples: Iterable[ProfileSample]) -> np.ndarray:
    samples = list(samples)
    pred = np.array([predict(model, x) for x in samples])
    true = np.array([x.latency for x in samples])
    return np.abs(pred - true) / true


def shard_latency(model: LatencyModel, device: Union[DeviceSpec, str], layer_bits: Sequence[int],
                  phase: str, workload: Workload, micro_batch: int) -> float:
    """Summed per-layer latency of a shard; decode is evaluated at t = n/2."""
    name = device.name if isinstance(device, DeviceSpec) else device
    if isinstance(device, DeviceSpec):
        bad = sorted({b for b in layer_bits if b not in device.supported_bits})
        if bad:
            raise ConfigError(f"device {name} does not support bitwidth(s) {bad}")
    s = workload.prompt_len
    total = 0.0
    for bit in layer_bits:
        if phase == "prefill":
            total += predict_prefill(model, name, bit, micro_batch, s)
        elif phase == "decode":
            total += predict_decode(model, name, bit, micro_batch, s, workload.gen_len / 2)
        else:
            raise ValueError(f"unknown phase {phase!r}")
    return total


def decode_slope(model: LatencyModel, device: str, bit: int, v: int) -> float:
    """d(latency)/dt of the decode model, for token-dependent simulation."""
    c = model.coef(device, bit, "decode")
    return float(v * c[2] + c[3])


def comm_bytes_prefill(hidden_dim: int, eta: int, s: int) -> int:
    return 2 * eta * s * hidden_dim


def comm_bytes_decode(hidden_dim: int, xi: int) -> int:
    return 2 * xi * hidden_dim
