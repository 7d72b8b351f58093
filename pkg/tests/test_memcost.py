import pytest
from hypothesis import given
from hypothesis import strategies as st

from pqplan.core import ConfigError, ModelSpec, Workload, model_preset
from pqplan.memcost import (decoder_weight_bytes, device_tmp_bytes, embed_mem_bytes,
                            kv_cache_bytes, layer_mem_bytes, peak_tmp_bytes, shard_mem_bytes)

OPT13 = model_preset("opt-13b")
OPT30 = model_preset("opt-30b")


def _model(h1=1, h2=1, heads=1, vocab=1, pos=1, d_t=None, norm="standard", L=1):
    return ModelSpec("m", L, h1, h2, heads, vocab, pos, d_t or h1, h1, norm)


def test_embed_opt30b():
    assert embed_mem_bytes(OPT30) == 1_470_787_584
    assert 1.3e9 <= embed_mem_bytes(OPT30) <= 1.5e9


def test_embed_minimal_and_projection_branch():
    assert embed_mem_bytes(_model()) == 6
    assert embed_mem_bytes(_model(h1=2, d_t=1, heads=1)) == 14


def test_decoder_weights():
    assert decoder_weight_bytes(OPT13, 4) == 157_347_840
    assert decoder_weight_bytes(OPT13, 16) == 629_207_040
    assert decoder_weight_bytes(_model(), 16) == 24
    assert decoder_weight_bytes(_model(norm="rms"), 16) == 6 * 2 + 4 * 2
    with pytest.raises(ConfigError):
        decoder_weight_bytes(OPT13, 5)


def test_opt30b_fp16_weights_near_60gb():
    total = OPT30.num_layers * decoder_weight_bytes(OPT30, 16) + embed_mem_bytes(OPT30)
    assert total == 60_664_934_400
    assert 55e9 <= total <= 65e9


def test_kv_cache():
    assert kv_cache_bytes(OPT30, 32, 512, 100) == 561_512_448
    assert kv_cache_bytes(_model(), 1, 0, 1) == 4
    assert 2 * kv_cache_bytes(OPT30, 32, 512, 100, 8) == kv_cache_bytes(OPT30, 32, 512, 100, 16)


def test_peak_tmp():
    assert peak_tmp_bytes(_model(), 1, "prefill", 1) == 12
    assert peak_tmp_bytes(OPT30, 8, "prefill", 512) == 469_762_048
    assert peak_tmp_bytes(OPT30, 8, "decode", 512, 50) == 1_007_104
    with pytest.raises(ValueError):
        peak_tmp_bytes(OPT30, 8, "train", 512)


@given(st.integers(1, 64), st.integers(1, 2048), st.integers(0, 512))
def test_decode_tmp_not_above_prefill(v, s, t):
    t = min(t, s)
    assert peak_tmp_bytes(OPT30, v, "decode", s, t) <= peak_tmp_bytes(OPT30, v, "prefill", s)


def test_shard_composition():
    w = Workload(32, 512, 100)
    empty = shard_mem_bytes(OPT13, [], w, False)
    assert empty.weight_bytes == empty.kv_bytes == empty.embed_bytes == 0
    assert empty.total == empty.tmp_bytes == device_tmp_bytes(OPT13, w, 32, 32)
    two = shard_mem_bytes(OPT13, [4, 4], w, False)
    assert two.weight_bytes == 2 * 157_347_840
    assert two.kv_bytes == 2 * kv_cache_bytes(OPT13, 32, 512, 100)
    first = shard_mem_bytes(OPT13, [4, 4], w, True)
    assert first.total - two.total == embed_mem_bytes(OPT13)


models = st.builds(
    lambda L, heads, hd, h2, vocab, pos: ModelSpec("m", L, heads * hd, h2, heads, vocab, pos,
                                                   heads * hd, heads * hd),
    st.integers(1, 4), st.integers(1, 8), st.integers(1, 64), st.integers(1, 512),
    st.integers(1, 1000), st.integers(1, 100))


@given(models, st.integers(1, 16), st.integers(1, 256), st.integers(1, 256))
def test_kv_linear_in_v_and_context(m, v, s, n):
    one = kv_cache_bytes(m, 1, s, n)
    assert kv_cache_bytes(m, v, s, n) == v * one
    assert kv_cache_bytes(m, 1, 1, 0) * (s + n) == one


@given(models, st.sampled_from([3, 4, 8, 16]), st.sampled_from([3, 4, 8, 16]))
def test_weights_monotone_in_bit(m, a, b):
    lo, hi = sorted((a, b))
    assert decoder_weight_bytes(m, lo) <= decoder_weight_bytes(m, hi)


@given(models)
def test_bit8_is_half_of_bit16_without_norms(m):
    norms = (6 * m.hidden_dim) * 2
    assert 2 * (decoder_weight_bytes(m, 8) - norms) == decoder_weight_bytes(m, 16) - norms


@given(models, st.integers(1, 8), st.integers(1, 64), st.integers(1, 64), st.integers(1, 4))
def test_memory_monotone_in_workload(m, v, s, n, dv):
    w = Workload(v, s, n)
    bigger = Workload(v + dv, s + dv, n + dv)
    assert layer_mem_bytes(m, 4, w) <= layer_mem_bytes(m, 4, bigger)
    for phase in ("prefill", "decode"):
        assert peak_tmp_bytes(m, v, phase, s, n) <= peak_tmp_bytes(m, v + dv, phase, s + dv, n + dv)


@given(models, st.lists(st.sampled_from([3, 4, 8, 16]), min_size=0, max_size=6),
       st.lists(st.sampled_from([3, 4, 8, 16]), min_size=0, max_size=6))
def test_shard_additivity(m, left, right):
    w = Workload(4, 16, 8)
    a = shard_mem_bytes(m, left, w, True)
    b = shard_mem_bytes(m, right, w, False)
    both = shard_mem_bytes(m, left + right, w, True)
    assert both.total == a.total + b.total - b.tmp_bytes
