"""Quantization-sensitivity indicator built from rounding-variance formulas.

For a linear operator with ``D`` weights quantized with step ``S(b)``, the output
variance grows by ``D * S(b)^2 * G(X)`` where ``G(X) = Var[X]/4`` for round-to-nearest
(an upper bound) and ``(E[X]^2 + Var[X])/6`` for stochastic rounding. A layer's
indicator is the sum over its linear operators.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .core import REFERENCE_BIT, ConfigError

STATS_COLUMNS = ("layer", "operator", "D_W", "w_min", "w_max", "x_mean", "x_var")


@dataclass(frozen=True)
class OperatorStats:
    name: str
    d_w: int
    w_min: float
    w_max: float
    x_mean: float
    x_var: float

    def __post_init__(self):
        if self.d_w < 1:
            raise ConfigError(f"operator {self.name}: D_W must be >= 1")
        if self.w_max < self.w_min:
            raise ConfigError(f"operator {self.name}: w_max < w_min")
        if self.x_var < 0:
            raise ConfigError(f"operator {self.name}: Var[X] must be >= 0")


@dataclass(frozen=True)
class QuantizerSpec:
    scheme: str = "symmetric"
    rounding: str = "deterministic"

    def __post_init__(self):
        if self.scheme not in ("symmetric", "asymmetric"):
            raise ConfigError(f"unknown quantization scheme {self.scheme!r}")
        if self.rounding not in ("deterministic", "stochastic"):
            raise ConfigError(f"unknown rounding mode {self.rounding!r}")


def scaling_factor(w_min: float, w_max: float, bit: int, scheme: str = "symmetric") -> float:
    if w_max < w_min:
        raise ValueError("w_max must be >= w_min")
    if scheme == "asymmetric":
        if bit < 1:
            raise ValueError("bit must be >= 1")
        return (w_max - w_min) / (2 ** bit - 1)
    if scheme == "symmetric":
        if bit < 2:
            raise ValueError("symmetric quantization needs bit >= 2")
        return max(abs(w_max), abs(w_min)) / (2 ** (bit - 1) - 1)
    raise ValueError(f"unknown scheme {scheme!r}")


def g_of_x(x_mean: float, x_var: float, rounding: str = "deterministic") -> float:
    if x_var < 0:
        raise ValueError("x_var must be >= 0")
    if rounding == "deterministic":
        return x_var / 4
    if rounding == "stochastic":
        return (x_mean ** 2 + x_var) / 6
    raise ValueError(f"unknown rounding {rounding!r}")


def layer_indicator(ops: Sequence[OperatorStats], bit: int,
                    quantizer: QuantizerSpec = QuantizerSpec()) -> float:
    if bit >= REFERENCE_BIT:
        return 0.0
    total = 0.0
    for op in ops:
        s = scaling_factor(op.w_min, op.w_max, bit, quantizer.scheme)
        total += op.d_w * s * s * g_of_x(op.x_mean, op.x_var, quantizer.rounding)
    return total


@dataclass(frozen=True)
class IndicatorTable:
    bits: tuple
    omega: np.ndarray  # shape (L, len(bits))

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float)
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if omega.ndim != 2 or omega.shape[1] != len(self.bits):
            raise ConfigError("indicator table shape does not match its bit list")
        if np.any(omega < 0) or not np.all(np.isfinite(omega)):
            raise ConfigError("indicator values must be finite and non-negative")

    @property
    def num_layers(self) -> int:
        return self.omega.shape[0]

    def value(self, layer: int, bit: int) -> float:
        return float(self.omega[layer, self.bits.index(bit)])

    def column(self, bit: int) -> np.ndarray:
        return self.omega[:, self.bits.index(bit)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer"] + [str(b) for b in self.bits])
        for i, row in enumerate(self.omega):
            writer.writerow([i] + [repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "IndicatorTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0].strip() != "layer":
            raise ConfigError("indicator CSV must start with a 'layer,<bit>,...' header")
        try:
            bits = tuple(int(b) for b in rows[0][1:])
            body = sorted((int(r[0]), [float(x) for x in r[1:]]) for r in rows[1:] if r)
        except ValueError:
            raise ConfigError("malformed indicator CSV") from None
        if [i for i, _ in body] != list(range(len(body))):
            raise ConfigError("indicator CSV layers must be 0..L-1 without gaps")
        return cls(bits, np.array([vals for _, vals in body]).reshape(len(body), len(bits)))

    def restricted(self, bits: Sequence[int]) -> "IndicatorTable":
        missing = [b for b in bits if b not in self.bits]
        if missing:
            raise ConfigError(f"indicator table lacks bitwidth(s) {missing}")
        return IndicatorTable(tuple(bits), np.stack([self.column(b) for b in bits], axis=1))


def build_indicator_table(layer_stats: Sequence[Sequence[OperatorStats]], bits: Sequence[int],
                          quantizer: QuantizerSpec = QuantizerSpec(),
                          num_layers: int = None) -> IndicatorTable:
    if num_layers is not None and len(layer_stats) != num_layers:
        raise ConfigError(f"stats cover {len(layer_stats)} layers, model has {num_layers}")
    for i, ops in enumerate(layer_stats):
        if not ops:
            raise ConfigError(f"missing calibration stats for layer {i}")
    omega = [[layer_indicator(ops, b, quantizer) for b in bits] for ops in layer_stats]
    return IndicatorTable(tuple(bits), np.array(omega, dtype=float).reshape(len(layer_stats), len(bits)))


def parse_stats_csv(text: str) -> List[List[OperatorStats]]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or set(STATS_COLUMNS) - set(reader.fieldnames):
        raise ConfigError(f"calibration CSV must have columns {','.join(STATS_COLUMNS)}")
    per_layer: Dict[int, List[OperatorStats]] = defaultdict(list)
    for lineno, row in enumerate(reader, start=2):
        try:
            layer = int(row["layer"])
            op = OperatorStats(row["operator"], int(row["D_W"]), float(row["w_min"]),
                               float(row["w_max"]), float(row["x_mean"]), float(row["x_var"]))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise ConfigError(f"calibration CSV line {lineno}: {exc}") from None
            raise ConfigError(f"calibration CSV line {lineno}: malformed row") from None
        per_layer[layer].append(op)
    if not per_layer:
        raise ConfigError("calibration CSV has no rows")
    num_layers = max(per_layer) + 1
    missing = [i for i in range(num_layers) if i not in per_layer]
    if missing or min(per_layer) < 0:
        raise ConfigError(f"missing calibration stats for layer(s) {missing}")
    return [per_layer[i] for i in range(num_layers)]


def stats_to_csv(layer_stats: Sequence[Sequence[OperatorStats]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STATS_COLUMNS)
    for i, ops in enumerate(layer_stats):
        for op in ops:
            writer.writerow([i, op.name, op.d_w, repr(op.w_min), repr(op.w_max),
                             repr(op.x_mean), repr(op.x_var)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Monte-Carlo check of the rounding-variance formulas

@dataclass(frozen=True)
class MCResult:
    total_var: float         # empirical Var[W~ X]
    total_var_se: float
    error_var: float         # empirical Var[(W~ - W) X]
    error_var_se: float
    clean_var: float         # analytic Var[W X] = Var[X] * ||W||^2
    predicted_extra: float   # D_W * S^2 * G(X)
    scale: float
    num_samples: int


def _var_and_se(y: np.ndarray) -> tuple:
    mu = y.mean()
    c = y - mu
    m2 = np.mean(c ** 2)
    m4 = np.mean(c ** 4)
    n = y.size
    return float(m2 * n / (n - 1)), float(np.sqrt(max(m4 - m2 * m2, 0.0) / n))


def quantize(w: np.ndarray, bit: int, scheme: str, rounding: str, rng: np.random.Generator,
             scale: float = None, dither: bool = False) -> np.ndarray:
    """Fake-quantize ``w``; returns dequantized values of the same shape.

    With ``dither`` the grid is shifted by an independent uniform offset per draw,
    which makes the fractional position of each weight uniform on [0, 1).
    """
    if bit >= REFERENCE_BIT:
        return np.array(w, dtype=float, copy=True)
    if scale is None:
        scale = scaling_factor(float(np.min(w)), float(np.max(w)), bit, scheme)
    if scale == 0:
        return np.array(w, dtype=float, copy=True)
    offset = float(np.min(w)) if scheme == "asymmetric" else 0.0
    z = (w - offset) / scale
    shift = rng.random(z.shape) if dither else 0.0
    z = z + shift
    if rounding == "deterministic":
        q = np.floor(z + 0.5)
    else:
        low = np.floor(z)
        q = low + (rng.random(z.shape) < (z - low))
    return (q - shift) * scale + offset


def mc_output_variance(weights: Sequence[float], x_mean: float, x_std: float, bit: int,
                       rounding: str = "stochastic", num_samples: int = 100_000,
                       scheme: str = "symmetric", seed: int = 0, dither: bool = None,
                       chunk: int = 50_000) -> MCResult:
    """Empirical variance of ``sum_k w~_k x_k`` with ``x_k ~ N(x_mean, x_std^2)`` i.i.d.

    Stochastic rounding draws fresh rounding decisions (and, by default, a fresh
    grid offset) per sample; deterministic rounding quantizes once.
    """
    rng = np.random.default_rng(seed)
    w = np.asarray(weights, dtype=float)
    d = w.size
    if dither is None:
        dither = rounding == "stochastic"
    scale = 0.0 if bit >= REFERENCE_BIT else scaling_factor(float(w.min()), float(w.max()), bit, scheme)
    fixed = None if rounding == "stochastic" else quantize(w, bit, scheme, rounding, rng, scale or None)
    totals, errors = [], []
    remaining = num_samples
    while remaining > 0:
        m = min(chunk, remaining)
        x = rng.normal(x_mean, x_std, size=(m, d))
        if fixed is not None:
            wq = np.broadcast_to(fixed, (m, d))
        elif bit >= REFERENCE_BIT or scale == 0:
            wq = np.broadcast_to(w, (m, d))
        else:
            wq = quantize(np.broadcast_to(w, (m, d)), bit, scheme, rounding, rng, scale, dither)
        totals.append(np.einsum("ij,ij->i", wq, x))
        errors.append(np.einsum("ij,ij->i", wq - w, x))
        remaining -= m
    total_var, total_se = _var_and_se(np.concatenate(totals))
    err_var, err_se = _var_and_se(np.concatenate(errors))
    g = g_of_x(x_mean, x_std ** 2, rounding)
    return MCResult(
        total_var=total_var, total_var_se=total_se,
        error_var=err_var, error_var_se=err_se,
        clean_var=float(x_std ** 2 * np.dot(w, w)),
        predicted_extra=0.0 if bit >= REFERENCE_BIT else d * scale ** 2 * g,
        scale=scale, num_samples=num_samples,
    )
