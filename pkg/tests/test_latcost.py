import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pqplan.core import ConfigError, DeviceSpec, Workload
from pqplan.latcost import (GroupFit, LatencyModel, ProfileSample, RankDeficientError,
                            UnknownGroupError, comm_bytes_decode, comm_bytes_prefill, fit,
                            ingest_profile, predict_decode, predict_prefill, samples_to_csv,
                            shard_latency)

HEADER = "device,bit,phase,v,s,t,latency_s\n"
TRUE_PREFILL = (0.001, 0.002, 1e-4, 5e-5, 1e-8)


def _prefill_samples(coef=TRUE_PREFILL, device="gpu", bit=4):
    pts = list(itertools.product((1, 2, 4, 8), (64, 256, 512)))
    return [ProfileSample(device, bit, "prefill", v, s, 0,
                          coef[0] + coef[1] * v + coef[2] * s + coef[3] * v * s + coef[4] * v * s * s)
            for v, s in pts]


def _model(prefill, decode=(0.0, 0.0, 0.0, 0.0), device="gpu", bit=4):
    return LatencyModel({(device, bit, "prefill"): GroupFit(tuple(prefill), 1, 0, 0, 0),
                         (device, bit, "decode"): GroupFit(tuple(decode), 1, 0, 0, 0)})


def test_ingest_single_row():
    out = ingest_profile(HEADER + "gpu,4,prefill,1,64,0,0.5\n")
    assert out == [ProfileSample("gpu", 4, "prefill", 1, 64, 0, 0.5)]


def test_ingest_averages_duplicates():
    out = ingest_profile(HEADER + "gpu,4,decode,1,64,3,1.0\ngpu,4,decode,1,64,3,3.0\n")
    assert len(out) == 1 and out[0].latency == 2.0


@pytest.mark.parametrize("row", ["gpu,4,prefill,1,64,0,-1", "gpu,x,prefill,1,64,0,1",
                                 "gpu,4,prefill,1,64,0,0", "gpu,4,train,1,64,0,1"])
def test_ingest_rejects(row):
    with pytest.raises(ConfigError):
        ingest_profile(HEADER + row + "\n")


def test_ingest_requires_columns():
    with pytest.raises(ConfigError):
        ingest_profile("device,bit\ngpu,4\n")


def test_csv_round_trip():
    samples = _prefill_samples()
    assert ingest_profile(samples_to_csv(samples)) == sorted(
        samples, key=lambda x: (x.device, x.bit, x.phase, x.v, x.s, x.t))


def test_exact_fit_recovers_coefficients():
    model = fit(_prefill_samples())
    coef = model.coef("gpu", 4, "prefill")
    np.testing.assert_allclose(coef, TRUE_PREFILL, rtol=0, atol=1e-9)
    assert model.groups[("gpu", 4, "prefill")].max_rel_residual < 1e-9


def test_predict_prefill_value():
    model = fit(_prefill_samples())
    assert predict_prefill(model, "gpu", 4, 8, 512) == pytest.approx(0.29397152, rel=1e-9)


def test_constant_samples():
    samples = [ProfileSample("gpu", 8, "prefill", v, s, 0, 0.5)
               for v, s in itertools.product((1, 2, 4), (16, 32, 64, 128))]
    coef = fit(samples).coef("gpu", 8, "prefill")
    assert coef[0] == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(coef[1:], 0.0, atol=1e-12)


def test_rank_deficient_group_is_named():
    samples = _prefill_samples()[:3]
    with pytest.raises(RankDeficientError, match="gpu.*bit=4.*prefill"):
        fit(samples)


def test_decode_fit_exact():
    c = (1e-3, 2e-4, 3e-7, 4e-6)
    samples = [ProfileSample("gpu", 16, "decode", v, s, t, c[0] + c[1] * v + c[2] * v * (t + s) + c[3] * (t + s))
               for v, s, t in itertools.product((1, 4, 16), (64, 512), (0, 50, 200))]
    model = fit(samples)
    np.testing.assert_allclose(model.coef("gpu", 16, "decode"), c, atol=1e-12)
    assert predict_decode(model, "gpu", 16, 4, 512, 50) == pytest.approx(
        c[0] + 4 * c[1] + 4 * 562 * c[2] + 562 * c[3], rel=1e-9)


def test_zero_and_negative_predictions_clamp():
    assert predict_prefill(_model((0, 0, 0, 0, 0)), "gpu", 4, 8, 512) == 0.0
    assert predict_prefill(_model((-1, 0, 0, 0, 0)), "gpu", 4, 8, 512) == 0.0
    assert predict_decode(_model((0,) * 5, (-5, 0, 0, 0)), "gpu", 4, 1, 1, 0) == 0.0


def test_unknown_group():
    with pytest.raises(UnknownGroupError):
        predict_prefill(_model((0,) * 5), "gpu", 8, 1, 1)


def test_model_json_round_trip():
    model = fit(_prefill_samples())
    assert LatencyModel.from_json(model.to_json()) == model
    with pytest.raises(ConfigError):
        LatencyModel.from_json('{"groups": [{"device": "x"}]}')


def test_shard_latency():
    lm = LatencyModel({
        ("gpu", 4, "prefill"): GroupFit((1.0, 0, 0, 0, 0), 1, 0, 0, 0),
        ("gpu", 16, "prefill"): GroupFit((3.0, 0, 0, 0, 0), 1, 0, 0, 0),
        ("gpu", 4, "decode"): GroupFit((0, 0, 0, 1e-3), 1, 0, 0, 0),
    })
    w = Workload(4, 100, 20)
    assert shard_latency(lm, "gpu", [], "prefill", w, 2) == 0.0
    assert shard_latency(lm, "gpu", [4, 4], "prefill", w, 2) == 2.0
    assert shard_latency(lm, "gpu", [4, 16], "prefill", w, 2) == 4.0
    # decode is evaluated at t = n/2
    assert shard_latency(lm, "gpu", [4], "decode", w, 2) == pytest.approx(0.11)
    dev = DeviceSpec("gpu", 100, 1e9, frozenset({16}))
    with pytest.raises(ConfigError):
        shard_latency(lm, dev, [4], "prefill", w, 2)


@given(st.lists(st.sampled_from([4, 16]), max_size=6), st.lists(st.sampled_from([4, 16]), max_size=6))
def test_shard_latency_additive(a, b):
    lm = fit(_prefill_samples(bit=4) + _prefill_samples(coef=(0.002, 0.001, 2e-4, 1e-5, 2e-8), bit=16))
    w = Workload(8, 256, 16)
    lhs = shard_latency(lm, "gpu", a + b, "prefill", w, 4)
    rhs = shard_latency(lm, "gpu", a, "prefill", w, 4) + shard_latency(lm, "gpu", b, "prefill", w, 4)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-15)


def test_comm_payloads():
    assert comm_bytes_prefill(7168, 4, 512) == 2 * 4 * 512 * 7168
    assert comm_bytes_decode(7168, 8) == 2 * 8 * 7168
