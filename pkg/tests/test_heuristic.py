import numpy as np
import pytest
from factories import random_instance
from hypothesis import given
from hypothesis import strategies as st

from pqplan.optimizer import (IlpInstance, InfeasiblePlanError, brute_force_oracle, evaluate,
                              violations, zero_latency)
from pqplan.optimizer.heuristic import adabits, bitwidth_transfer, default_rules


def _constructed(budget0):
    """Two stages; device 1 is 3x slower and 4-bit layers run twice as fast as 8-bit."""
    L = 4
    speed = np.array([1.0, 3.0])
    per_bit = np.array([0.5, 1.0])
    pre = speed[None, :, None] * per_bit[None, None, :] * np.ones((L, 2, 2))
    return IlpInstance(bits=(4, 8), lat_pre=pre, lat_dec=pre * 0.01, mem=np.tile([1, 2], (L, 1)),
                       budget=np.array([budget0, 4]), omega=np.tile([1e-3, 0.0], (L, 1)), theta=1.0,
                       global_batch=4, eta=1, xi=4, gen_len=2,
                       comm_pre=np.zeros(2), comm_dec=np.zeros(2))


def test_default_rules_follow_memory_equivalence():
    assert default_rules((3, 4, 8, 16)) == ((3, 4, 1), (4, 8, 2), (3, 8, 2), (4, 16, 4), (8, 16, 2))
    assert default_rules((4, 16)) == ((4, 16, 4),)


def test_adabits_abundant_memory_is_full_precision():
    inst = random_instance(np.random.default_rng(0), 5, 2, 3, bits=(4, 8, 16), tight=10.0)
    cand = adabits(inst)
    assert cand.bits == (16,) * 5
    assert cand.objective.omega_sum == 0.0


def test_adabits_infeasible():
    inst = random_instance(np.random.default_rng(0), 5, 2, 2, tight=0.01)
    with pytest.raises(InfeasiblePlanError):
        adabits(inst)


def test_adabits_places_low_bits_on_small_device():
    inst = IlpInstance(bits=(4, 16), lat_pre=np.ones((4, 2, 2)), lat_dec=np.ones((4, 2, 2)),
                       mem=np.tile([1, 4], (4, 1)), budget=np.array([2, 8]),
                       omega=np.array([[0.1, 0], [0.4, 0], [0.3, 0], [0.2, 0]]), theta=1.0,
                       global_batch=1, eta=1, xi=1, gen_len=1,
                       comm_pre=np.zeros(2), comm_dec=np.zeros(2))
    cand = adabits(inst)
    oracle = brute_force_oracle(zero_latency(inst))
    assert cand.objective.omega_sum == pytest.approx(oracle.objective.omega_sum)
    assert cand.stages == ((0, 2), (2, 4))
    assert cand.bits == (4, 4, 16, 16)


@given(st.integers(0, 10 ** 6))
def test_adabits_minimises_indicator(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, int(rng.integers(1, 7)), int(rng.integers(1, 4)),
                           int(rng.integers(1, 4)), unsupported=0.2)
    try:
        oracle = brute_force_oracle(zero_latency(inst).with_theta(1.0))
    except InfeasiblePlanError:
        with pytest.raises(InfeasiblePlanError):
            adabits(inst)
        return
    cand = adabits(inst)
    assert not violations(inst, cand.stages, cand.bits)
    assert cand.objective.omega_sum == pytest.approx(oracle.objective.omega_sum, rel=1e-9, abs=1e-12)


@given(st.integers(0, 10 ** 6))
def test_transfer_never_worsens_and_strictly_decreases(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, int(rng.integers(2, 10)), int(rng.integers(1, 4)),
                           int(rng.integers(1, 5)), comm=0.2)
    try:
        start = adabits(inst)
    except InfeasiblePlanError:
        return
    trace = []
    out = bitwidth_transfer(inst, start, trace=trace)
    assert not violations(inst, out.stages, out.bits)
    assert out.objective.total <= start.objective.total
    assert all(b < a for a, b in zip(trace, trace[1:]))
    assert trace[-1] == out.objective.total


def test_transfer_fixed_point_returns_start():
    inst = _constructed(5)
    optimum = brute_force_oracle(inst)
    assert bitwidth_transfer(inst, optimum) == optimum


def test_transfer_reaches_oracle_on_constructed_instance():
    inst = _constructed(5)
    start = adabits(inst)
    assert start.bits == (8, 8, 8, 8)
    out = bitwidth_transfer(inst, start)
    # 3 layers at 4 bit on the fast device, one on the slow one: 3*1.5 + 3.0 + 0.03 + 0.004
    assert out.objective.total == pytest.approx(7.534, rel=1e-12)
    assert out.objective.total == pytest.approx(brute_force_oracle(inst).objective.total, rel=1e-12)


def test_transfer_rejects_infeasible_start():
    inst = _constructed(5)
    bad = evaluate(inst, ((0, 1), (1, 4)), (8, 8, 8, 8))
    assert not bad.feasible
    with pytest.raises(InfeasiblePlanError):
        bitwidth_transfer(inst, bad)


def test_exchange_rules_alone_are_weaker():
    inst = _constructed(4)
    start = adabits(inst)
    plain = bitwidth_transfer(inst, start, relocate=False, convert=False)
    full = bitwidth_transfer(inst, start)
    assert full.objective.total <= plain.objective.total
