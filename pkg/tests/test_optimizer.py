import itertools
import time

import numpy as np
import pytest
from factories import random_instance
from hypothesis import given
from hypothesis import strategies as st

from pqplan.optimizer import (IlpInstance, InfeasiblePlanError, SolverGuardError, SolverOptions,
                              brute_force_oracle, candidate_count, enumerate_candidates, evaluate,
                              expand_candidate, group_layers, objective, partitions, solve_bnb,
                              solve_ilp, violations, zero_latency)
from pqplan.optimizer.milp import export_lp


def _naive_best(inst):
    """Independent enumeration: every composition, every bit vector, recomputed by hand."""
    L, N = inst.num_layers, inst.num_devices
    best = None
    for cuts in itertools.combinations(range(1, L), N - 1):
        edges = (0,) + cuts + (L,)
        owner = [j for j in range(N) for _ in range(edges[j], edges[j + 1])]
        for ks in itertools.product(range(len(inst.bits)), repeat=L):
            pre, dec, mem = np.zeros(N), np.zeros(N), np.zeros(N)
            om = 0.0
            for i, (j, k) in enumerate(zip(owner, ks)):
                pre[j] += inst.lat_pre[i, j, k]
                dec[j] += inst.lat_dec[i, j, k]
                mem[j] += inst.mem[i, k]
                om += inst.omega[i, k]
            if np.any(mem > inst.budget) or not np.all(np.isfinite(pre + dec)):
                continue
            a = -(-inst.global_batch // inst.eta) - 1
            c = (-(-inst.global_batch // inst.xi) - 1) * (inst.gen_len - 1)
            total = (a * max(pre.max(), inst.comm_pre.max()) + c * max(dec.max(), inst.comm_dec.max())
                     + pre.sum() + dec.sum() + inst.theta * om)
            if best is None or total < best:
                best = total
    return best


def _two_stage():
    return IlpInstance(bits=(16,), lat_pre=np.full((2, 2, 1), 2.0), lat_dec=np.full((2, 2, 1), 0.1),
                       mem=np.ones((2, 1)), budget=np.array([1, 1]), omega=np.zeros((2, 1)),
                       theta=0.0, global_batch=8, eta=2, xi=4, gen_len=11,
                       comm_pre=np.zeros(2), comm_dec=np.zeros(2))


def test_objective_example():
    inst = _two_stage()
    ob = objective(inst, ((0, 1), (1, 2)), (16, 16))
    assert (ob.pre_bubbles, ob.dec_bubbles) == (3, 10)
    assert ob.total == pytest.approx(11.2, rel=1e-12)


def test_objective_single_microbatch_has_no_bubbles():
    from dataclasses import replace
    inst = replace(_two_stage(), eta=8, xi=8)
    ob = objective(inst, ((0, 1), (1, 2)), (16, 16))
    assert ob.pre_bubbles == ob.dec_bubbles == 0
    assert ob.total == pytest.approx(4.2)


def test_objective_uses_comm_when_larger():
    from dataclasses import replace
    inst = replace(_two_stage(), comm_pre=np.array([5.0, 0.0]))
    assert objective(inst, ((0, 1), (1, 2)), (16, 16)).t_max_pre == 5.0


def test_violations_report_memory_and_support():
    inst = _two_stage()
    assert violations(inst, ((0, 1), (1, 2)), (16, 16)) == []
    assert violations(inst, ((0, 2), (2, 2)), (16, 16))
    from dataclasses import replace
    assert "budget" in violations(replace(inst, budget=np.array([0, 1])), ((0, 1), (1, 2)), (16, 16))[0]
    assert not evaluate(inst, ((0, 1), (1, 2)), (8, 16)).feasible


def test_partitions_and_candidate_count():
    assert list(partitions(3, 2)) == [((0, 1), (1, 3)), ((0, 2), (2, 3))]
    assert candidate_count(4, 2, 2) == 48
    inst = random_instance(np.random.default_rng(0), 4, 2, 2)
    assert sum(1 for _ in enumerate_candidates(inst)) == 48


def test_oracle_guard():
    inst = random_instance(np.random.default_rng(0), 9, 2, 2)
    with pytest.raises(SolverGuardError):
        brute_force_oracle(inst)


@pytest.mark.parametrize("seed", range(40))
def test_bnb_matches_independent_enumeration(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(2, 6))
    N = int(rng.integers(1, min(3, L) + 1))
    inst = random_instance(rng, L, N, int(rng.integers(1, 4)), unsupported=0.3, comm=0.5)
    expected = _naive_best(inst)
    if expected is None:
        with pytest.raises(InfeasiblePlanError):
            solve_ilp(inst)
        return
    got = solve_ilp(inst)
    assert got.optimal
    assert got.objective.total == pytest.approx(expected, rel=1e-9)
    assert evaluate(inst, got.stages, got.bits).objective.total == pytest.approx(got.objective.total, rel=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_highs_backend_matches_bnb(seed):
    rng = np.random.default_rng(1000 + seed)
    inst = random_instance(rng, int(rng.integers(3, 7)), int(rng.integers(1, 4)),
                           int(rng.integers(1, 4)), comm=0.3)
    try:
        a = solve_ilp(inst)
    except InfeasiblePlanError:
        with pytest.raises(InfeasiblePlanError):
            solve_ilp(inst, SolverOptions(backend="highs"))
        return
    b = solve_ilp(inst, SolverOptions(backend="highs"))
    assert not violations(inst, b.stages, b.bits)
    assert b.objective.total == pytest.approx(a.objective.total, rel=1e-6)


def test_infeasible_instance_raises():
    from dataclasses import replace
    inst = replace(_two_stage(), budget=np.array([0, 0]))
    with pytest.raises(InfeasiblePlanError):
        solve_ilp(inst)
    with pytest.raises(InfeasiblePlanError):
        brute_force_oracle(inst)


def test_more_devices_than_layers_is_infeasible():
    inst = random_instance(np.random.default_rng(3), 2, 3, 2, tight=5.0)
    with pytest.raises(InfeasiblePlanError):
        solve_ilp(inst)


def test_cutoff_returns_none_when_not_beaten():
    inst = random_instance(np.random.default_rng(4), 5, 2, 2, tight=2.0)
    best = solve_bnb(inst)
    assert solve_bnb(inst, cutoff=best.objective.total * 0.5) is None


def test_solver_rejects_unknown_backend():
    with pytest.raises(ValueError):
        solve_ilp(_two_stage(), SolverOptions(backend="cplex"))


@given(st.integers(0, 10 ** 6))
def test_solution_is_feasible_and_not_beaten_by_oracle(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, int(rng.integers(1, 7)), int(rng.integers(1, 4)),
                           int(rng.integers(1, 4)), unsupported=0.2, comm=0.2)
    try:
        oracle = brute_force_oracle(inst)
    except InfeasiblePlanError:
        return
    got = solve_ilp(inst)
    assert not violations(inst, got.stages, got.bits)
    assert abs(got.objective.total - oracle.objective.total) <= 1e-9 * max(1.0, oracle.objective.total)


@given(st.integers(0, 10 ** 6))
def test_theta_zero_ignores_quality_and_huge_theta_minimises_omega(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 4, 2, 3, tight=1.2)
    try:
        base = solve_ilp(inst.with_theta(0.0))
    except InfeasiblePlanError:
        return
    quality = solve_ilp(zero_latency(inst).with_theta(1.0))
    heavy = solve_ilp(inst.with_theta(1e9))
    assert heavy.objective.omega_sum == pytest.approx(quality.objective.omega_sum, rel=1e-9, abs=1e-12)
    assert base.objective.latency <= heavy.objective.latency * (1 + 1e-9)


def test_grouping_halves_layers_and_expands_back():
    inst = random_instance(np.random.default_rng(5), 7, 2, 2, tight=2.0)
    g = group_layers(inst, 2)
    assert g.num_layers == 4 and g.group_sizes == (2, 2, 2, 1)
    np.testing.assert_allclose(g.lat_pre[0], inst.lat_pre[0] + inst.lat_pre[1])
    cand = solve_ilp(g)
    stages, bits = expand_candidate(g, cand)
    full = evaluate(inst, stages, bits)
    assert full.feasible
    assert full.objective.total == pytest.approx(cand.objective.total, rel=1e-9)
    assert full.objective.total >= solve_ilp(inst).objective.total * (1 - 1e-9)
    assert group_layers(inst, 1) is inst
    with pytest.raises(ValueError):
        group_layers(inst, 0)


def test_time_limit_returns_incumbent_or_raises():
    inst = random_instance(np.random.default_rng(6), 60, 4, 4, tight=1.0)
    t0 = time.monotonic()
    try:
        cand = solve_bnb(inst, time_limit_s=0.2)
        assert not violations(inst, cand.stages, cand.bits)
    except InfeasiblePlanError:
        pass
    assert time.monotonic() - t0 < 5


def test_export_lp_structure():
    inst = random_instance(np.random.default_rng(7), 3, 2, 2)
    text = export_lp(inst, "demo")
    for section in ("Minimize", "Subject To", "Bounds", "Binary", "End"):
        assert section in text
    assert all(len(line) <= 200 for line in text.splitlines())
    assert export_lp(inst, "demo") == text
