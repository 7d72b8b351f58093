import pytest

from pqplan.core import Workload, cluster_from_counts, model_preset
from pqplan.indicator import build_indicator_table
from pqplan.optimizer import InfeasiblePlanError
from pqplan.optimizer.baselines import even_partition, pipeedge_plan, uniform_plan
from pqplan.optimizer.search import PlannerOptions
from pqplan.synthetic import synthetic_latency_model, synthetic_layer_stats

BITS = (3, 4, 8, 16)


@pytest.fixture(scope="module")
def setup():
    model = model_preset("opt-30b")
    cluster = cluster_from_counts(["T4-16G", "V100-32G"], [1, 1])
    workload = Workload(8, 256, 32)
    latency = synthetic_latency_model(model, ["T4-16G", "V100-32G"], BITS)
    indicator = build_indicator_table(synthetic_layer_stats(model), BITS)
    return model, cluster, workload, indicator, latency


def test_even_partition():
    assert even_partition(10, 3) == ((0, 4), (4, 7), (7, 10))
    assert even_partition(4, 4) == ((0, 1), (1, 2), (2, 3), (3, 4))
    with pytest.raises(InfeasiblePlanError):
        even_partition(2, 3)


def test_uniform_plan_is_single_precision_and_even(setup):
    plan = uniform_plan(*setup, PlannerOptions(bits=BITS))
    assert len(set(plan.bits)) == 1
    assert plan.partition == even_partition(48, 2)
    assert plan.device_order == (0, 1)
    assert plan.eta == plan.xi
    assert plan.status == "baseline"
    # 24 layers on the 16 GiB device only fit at 4 bit
    assert plan.bits[0] == 4


def test_pipeedge_plan_uses_even_microbatches(setup):
    plan = pipeedge_plan(*setup, PlannerOptions(bits=BITS))
    assert len(set(plan.bits)) == 1
    assert plan.eta == plan.xi == 4
    assert plan.objective.theta == 0.0
    # an uneven split keeps 8 bit, fp16 (60 GB of weights) cannot fit 48 GiB
    assert plan.bits[0] == 8
    sizes = [e - s for s, e in plan.partition]
    assert sum(sizes) == 48 and min(sizes) >= 1


def test_baselines_infeasible(setup):
    model, cluster, workload, indicator, latency = setup
    with pytest.raises(InfeasiblePlanError):
        uniform_plan(model, cluster, Workload(8, 256, 32), indicator, latency,
                     PlannerOptions(bits=(16,)))
    with pytest.raises(InfeasiblePlanError):
        pipeedge_plan(model, cluster, workload, indicator, latency, PlannerOptions(bits=(16,)))
