"""Synthetic-but-plausible profiles for desk-scale studies.

Latencies follow a roofline-style model that is exactly linear in the latency
features: prefill is compute-bound (weight FLOPs plus attention FLOPs), decode is
bandwidth-bound (weight bytes plus KV-cache reads). Quantized kernels carry
per-bitwidth efficiency factors: weight-only 3/4-bit kernels read fewer bytes but
dequantize on the fly, and an LLM.int8()-style 8-bit kernel is slower than FP16.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DEVICE_PRESETS, ConfigError, DeviceProfile, ModelSpec
from .indicator import OperatorStats
from .latcost import GroupFit, LatencyModel, ProfileSample, features
from .memcost import decoder_weight_bytes

LAUNCH_OVERHEAD_S = 60e-6
COMPUTE_EFFICIENCY = 0.45
BANDWIDTH_EFFICIENCY = 0.7


def _default_prefill_factor() -> Dict[int, float]:
    return {16: 1.0, 8: 1.9, 4: 1.25, 3: 1.3}


def _default_decode_factor() -> Dict[int, float]:
    # multiplies the time to stream the (quantized) weight bytes
    return {16: 1.0, 8: 2.6, 4: 1.5, 3: 1.8}


@dataclass(frozen=True)
class KernelFactors:
    prefill: Dict[int, float] = field(default_factory=_default_prefill_factor)
    decode: Dict[int, float] = field(default_factory=_default_decode_factor)


def true_coefficients(model: ModelSpec, profile: DeviceProfile, bit: int,
                      kernels: KernelFactors = KernelFactors()) -> Tuple[np.ndarray, np.ndarray]:
    """Per-layer (prefill, decode) coefficient vectors for one device and bitwidth."""
    if bit not in kernels.prefill or bit not in kernels.decode:
        raise ConfigError(f"no kernel factors for bitwidth {bit}")
    h1, h2 = model.hidden_dim, model.ffn_dim
    flops = profile.fp16_tflops * 1e12 * COMPUTE_EFFICIENCY
    bw = profile.mem_bw_gbs * 1e9 * BANDWIDTH_EFFICIENCY
    lin_flops = 2.0 * (4 * h1 * h1 + 2 * h1 * h2)      # per token
    weight_time = decoder_weight_bytes(model, bit) / bw
    kp = kernels.prefill[bit]
    kd = kernels.decode[bit]
    pre = np.array([
        LAUNCH_OVERHEAD_S + weight_time,
        8.0 * h1 * 2 / bw,                  # per-sequence bookkeeping
        0.0,
        kp * lin_flops / flops,             # per token
        4.0 * h1 / flops,                   # attention scores and mixing, per token^2
    ])
    dec = np.array([
        LAUNCH_OVERHEAD_S + kd * weight_time,
        lin_flops / flops + 6.0 * h1 * 2 / bw,
        2.0 * h1 * 2 / bw,                  # K and V reads per cached token
        0.0,
    ])
    return pre, dec


def synthetic_latency_model(model: ModelSpec, device_names: Sequence[str], bits: Sequence[int],
                            kernels: KernelFactors = KernelFactors(),
                            profiles: Optional[Dict[str, DeviceProfile]] = None) -> LatencyModel:
    """The noiseless ground-truth model as a LatencyModel (zero residuals)."""
    profiles = profiles or DEVICE_PRESETS
    groups = {}
    for name in sorted(set(device_names)):
        if name not in profiles:
            raise ConfigError(f"no synthetic profile for device {name!r}")
        for b in bits:
            pre, dec = true_coefficients(model, profiles[name], b, kernels)
            groups[(name, int(b), "prefill")] = GroupFit(tuple(map(float, pre)), 0, 0.0, 0.0, 0.0)
            groups[(name, int(b), "decode")] = GroupFit(tuple(map(float, dec)), 0, 0.0, 0.0, 0.0)
    return LatencyModel(groups)


DEFAULT_V = (1, 2, 4, 8, 16, 32)
DEFAULT_S = (64, 128, 256, 512, 1024)
DEFAULT_T = (0, 32, 64, 128, 256)


def synthetic_samples(model: ModelSpec, device_names: Sequence[str], bits: Sequence[int],
                      v_grid: Sequence[int] = DEFAULT_V, s_grid: Sequence[int] = DEFAULT_S,
                      t_grid: Sequence[int] = DEFAULT_T, noise: float = 0.0, seed: int = 0,
                      kernels: KernelFactors = KernelFactors(),
                      profiles: Optional[Dict[str, DeviceProfile]] = None) -> List[ProfileSample]:
    """Profile samples on a grid; ``noise`` is the std-dev of a multiplicative Gaussian."""
    profiles = profiles or DEVICE_PRESETS
    rng = np.random.default_rng(seed)
    out = []
    for name in sorted(set(device_names)):
        for b in sorted(bits):
            pre, dec = true_coefficients(model, profiles[name], b, kernels)
            for v in v_grid:
                for s in s_grid:
                    y = float(features("prefill", v, s) @ pre)
                    out.append(ProfileSample(name, b, "prefill", v, s, 0, _noisy(y, noise, rng)))
                    for t in t_grid:
                        y = float(features("decode", v, s, t) @ dec)
                        out.append(ProfileSample(name, b, "decode", v, s, t, _noisy(y, noise, rng)))
    return out


def _noisy(y: float, noise: float, rng: np.random.Generator) -> float:
    if noise <= 0:
        return y
    # clip keeps latencies positive for any noise level
    return y * max(1.0 + noise * rng.standard_normal(), 0.05)


def synthetic_layer_stats(model: ModelSpec, seed: int = 0) -> List[List[OperatorStats]]:
    """Calibration-like statistics: activations grow with depth, a few outlier layers."""
    rng = np.random.default_rng(seed)
    h1, h2 = model.hidden_dim, model.ffn_dim
    L = model.num_layers
    outliers = set(rng.choice(L, size=max(1, L // 8), replace=False).tolist())
    stats = []
    for i in range(L):
        depth = 1.0 + 2.0 * i / max(1, L - 1)
        bump = 4.0 if i in outliers else 1.0
        ops = []
        for name, d_w in (("q_proj", h1), ("k_proj", h1), ("v_proj", h1), ("out_proj", h1),
                          ("fc1", h1), ("fc2", h2)):
            w_abs = float(rng.uniform(0.05, 0.2)) * (1.5 if name == "fc2" else 1.0)
            x_var = float(rng.uniform(0.5, 1.5)) * depth * bump
            ops.append(OperatorStats(name, d_w, -w_abs * float(rng.uniform(0.8, 1.0)), w_abs,
                                     float(rng.normal(0, 0.1)), x_var))
        stats.append(ops)
    return stats
