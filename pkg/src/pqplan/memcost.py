"""Analytic memory model: weights, KV cache, embeddings, peak temporaries.

All results are integral bytes. Embeddings and layer norms stay FP16.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .core import DEFAULT_BITS, ConfigError, ModelSpec, Workload

FP16_BYTES = 2
DEFAULT_TMP_ALPHA = 2


@dataclass(frozen=True)
class MemBreakdown:
    weight_bytes: int
    kv_bytes: int
    tmp_bytes: int
    embed_bytes: int

    @property
    def total(self) -> int:
        return self.weight_bytes + self.kv_bytes + self.tmp_bytes + self.embed_bytes


def _bits_to_bytes(count: int, bit: int) -> int:
    # count * bit / 8, exact for every supported bitwidth on realistic shapes
    numer = count * bit
    if numer % 8:
        return -(-numer // 8)
    return numer // 8


def embed_mem_bytes(m: ModelSpec) -> int:
    """Token embedding + position table + projections + LM head, in FP16."""
    proj = 2 * m.hidden_dim * m.embed_dim if m.embed_dim != m.hidden_dim else 0
    params = (m.vocab_size * m.embed_dim + m.max_pos * m.embed_dim + proj
              + m.vocab_size * m.embed_dim)
    return params * FP16_BYTES


def norm_params(m: ModelSpec) -> int:
    return (6 if m.norm_kind == "standard" else 4) * m.hidden_dim


def decoder_weight_bytes(m: ModelSpec, bit: int) -> int:
    if bit not in DEFAULT_BITS:
        raise ConfigError(f"unsupported bitwidth {bit}")
    linear = 4 * m.hidden_dim ** 2 + 2 * m.hidden_dim * m.ffn_dim
    return _bits_to_bytes(linear, bit) + norm_params(m) * FP16_BYTES


def kv_cache_bytes(m: ModelSpec, v: int, s: int, n: int, bit_kv: int = 16) -> int:
    """Per-layer KV reservation for ``v`` sequences of ``s + n`` tokens."""
    return _bits_to_bytes(2 * v * (s + n) * m.hidden_dim, bit_kv)


def peak_tmp_bytes(m: ModelSpec, v: int, phase: str, s: int, t: int = 0,
                   alpha: float = DEFAULT_TMP_ALPHA) -> int:
    """Worst-case transient activation buffer of one decoder layer.

    Prefill processes ``s`` query tokens against an ``s``-token context; decode
    processes one token against ``s + t`` cached tokens.
    """
    if phase == "prefill":
        length, ctx = s, s
    elif phase == "decode":
        length, ctx = 1, s + t
    else:
        raise ValueError(f"unknown phase {phase!r}")
    elems = max(3 * v * length * m.hidden_dim,
                v * length * m.ffn_dim,
                v * m.num_heads * length * ctx)
    return int(round(alpha * FP16_BYTES * elems))


def device_tmp_bytes(m: ModelSpec, w: Workload, eta: int, xi: int,
                     alpha: float = DEFAULT_TMP_ALPHA) -> int:
    """Temporary reservation charged once per device for a (eta, xi) schedule."""
    return max(peak_tmp_bytes(m, eta, "prefill", w.prompt_len, 0, alpha),
               peak_tmp_bytes(m, xi, "decode", w.prompt_len, w.gen_len, alpha))


def layer_mem_bytes(m: ModelSpec, bit: int, w: Workload, bit_kv: int = 16) -> int:
    """Memory of one resident decoder layer: weights plus its whole-batch KV cache."""
    return decoder_weight_bytes(m, bit) + kv_cache_bytes(
        m, w.global_batch, w.prompt_len, w.gen_len, bit_kv)


def shard_mem_bytes(m: ModelSpec, layer_bits: Iterable[int], w: Workload,
                    is_first_device: bool, eta: int = None, xi: int = None,
                    bit_kv: int = 16, alpha: float = DEFAULT_TMP_ALPHA) -> MemBreakdown:
    layer_bits = list(layer_bits)
    eta = w.global_batch if eta is None else eta
    xi = w.global_batch if xi is None else xi
    weight = sum(decoder_weight_bytes(m, b) for b in layer_bits)
    kv = len(layer_bits) * kv_cache_bytes(m, w.global_batch, w.prompt_len, w.gen_len, bit_kv)
    return MemBreakdown(
        weight_bytes=weight,
        kv_bytes=kv,
        tmp_bytes=device_tmp_bytes(m, w, eta, xi, alpha),
        embed_bytes=embed_mem_bytes(m) if is_first_device else 0,
    )
