import math

import numpy as np
import pytest

from packprefetch.datasets import DatasetPreset, Workload
from packprefetch.scheduler import Request
from packprefetch.service import (
    ServiceConfig,
    SloUnreachable,
    bandwidth_savings,
    best_case_tbt,
    capacity_search,
    percentile,
    run,
    slo_threshold,
)
from packprefetch.stage import PACKING, PACKING_PREFETCH

from conftest import toy_hw, toy_spec


def test_percentile_nearest_rank():
    assert percentile(list(range(1, 101)), 0.99) == 99
    assert percentile([5], 0.3) == 5
    assert percentile([3, 1, 2], 0.5) == 2
    assert percentile([1, 2, 3, 4], 1.0) == 4
    with pytest.raises(ValueError):
        percentile([], 0.5)
    with pytest.raises(ValueError):
        percentile([1], 0)


def test_single_request_toy_timeline():
    # prefill-only iteration over 2 tokens = 26 s; decode at kv 2 = 11 s (see stage fixtures)
    m = run(toy_spec(), toy_hw(), [Request(0, 0.0, 2, 2)], PACKING, ServiceConfig(chunk_size=4))
    assert m.ttft_samples == [26.0]
    assert m.tbt_samples == [11.0]
    assert m.sched_delay_samples == [0.0]
    assert m.completed == 1 and m.span == 37.0
    assert m.achieved_qps == 1 / 37
    pm = run(toy_spec(), toy_hw(prefetch=16), [Request(0, 0.0, 2, 2)], PACKING_PREFETCH, ServiceConfig(chunk_size=4))
    assert pm.tbt_samples == [10.0]


def test_single_request_8b(llama8b, v6e):
    from packprefetch.scheduler import PackedBatch
    from packprefetch.stage import simulate_iteration
    m = run(llama8b, v6e, [Request(0, 1.0, 512, 7)], PACKING_PREFETCH)
    one = simulate_iteration(llama8b, v6e, PackedBatch(prefill_slices=((0, 0, 512),)), PACKING_PREFETCH)
    assert m.ttft_samples == [pytest.approx(one.total_latency, rel=1e-12)]
    assert len(m.tbt_samples) == 6


def test_empty_workload():
    m = run(toy_spec(), toy_hw(), [])
    assert m.completed == 0 and m.tbt_samples == [] and m.p99_tbt is None


def test_queueing_and_idle_gap():
    reqs = [Request(0, 0.0, 2, 1), Request(1, 0.0, 2, 1), Request(2, 100.0, 2, 1)]
    m = run(toy_spec(), toy_hw(), reqs, PACKING, ServiceConfig(chunk_size=2, warmup_fraction=0))
    # one 2-token prefill per iteration (26 s); the third request waits for nobody
    assert m.ttft_samples == [26.0, 52.0, 26.0]
    assert m.sched_delay_samples == [0.0, 26.0, 0.0]
    assert m.span == 126.0


def test_warmup_trim():
    def reqs():
        return [Request(i, float(i), 2, 2) for i in range(40)]

    full = run(toy_spec(), toy_hw(), reqs(), PACKING, ServiceConfig(chunk_size=4, warmup_fraction=0))
    trimmed = run(toy_spec(), toy_hw(), reqs(), PACKING, ServiceConfig(chunk_size=4))
    assert len(full.ttft_samples) == 40 and len(trimmed.ttft_samples) == 38


def test_run_rejects_reused_requests():
    reqs = [Request(0, 0.0, 2, 2)]
    run(toy_spec(), toy_hw(), reqs, PACKING, ServiceConfig(chunk_size=4))
    with pytest.raises(ValueError, match="fresh"):
        run(toy_spec(), toy_hw(), reqs, PACKING, ServiceConfig(chunk_size=4))


@pytest.fixture(scope="module")
def chat_workload():
    return Workload.synthetic(DatasetPreset.named("openchat_sharegpt4"), 120, seed=3)


def test_determinism(llama8b, v6e, chat_workload):
    a = run(llama8b, v6e, chat_workload.requests(2.0), PACKING_PREFETCH)
    b = run(llama8b, v6e, chat_workload.requests(2.0), PACKING_PREFETCH)
    assert a == b


def test_paired_dominance(llama8b, v6e, chat_workload):
    for rate in (1.0, 3.0):
        po = run(llama8b, v6e, chat_workload.requests(rate), PACKING)
        pp = run(llama8b, v6e, chat_workload.requests(rate), PACKING_PREFETCH)
        assert pp.p99_tbt <= po.p99_tbt


def test_littles_law_low_load(llama8b, v6e, chat_workload):
    reqs = chat_workload.requests(0.3)
    m = run(llama8b, v6e, reqs, PACKING_PREFETCH, ServiceConfig(warmup_fraction=0))
    finish = {}
    for r in reqs:
        finish[r.id] = r.last_token_time
    residence = np.mean([finish[r.id] - r.arrival_time for r in reqs])
    lam = len(reqs) / m.span
    assert m.mean_concurrency == pytest.approx(lam * residence, rel=0.10)


def test_slo_threshold_toy():
    # two decode members at kv 4: embed/qkv idle time stages 3 + 13 B, both attentions drop to 1 s
    assert slo_threshold(toy_spec(), toy_hw(prefetch=16), num_decode=2, kv_len=4) == 20
    assert slo_threshold(toy_spec(), toy_hw(prefetch=0), num_decode=2, kv_len=4) == 24


def test_slo_unreachable(llama8b, v6e, chat_workload):
    floor = best_case_tbt(llama8b, v6e)
    with pytest.raises(SloUnreachable, match="SLO unreachable"):
        capacity_search(llama8b, v6e, chat_workload, PACKING, floor / 2)


def test_capacity_monotone(llama8b, v6e, chat_workload):
    slo = slo_threshold(llama8b, v6e)
    loose = capacity_search(llama8b, v6e, chat_workload, PACKING, 2 * slo).qps
    tight = capacity_search(llama8b, v6e, chat_workload, PACKING, slo).qps
    assert loose >= tight
    fast = capacity_search(llama8b, v6e.with_bw_scale(2), chat_workload, PACKING, slo).qps
    assert fast >= tight
    pp = capacity_search(llama8b, v6e, chat_workload, PACKING_PREFETCH, slo).qps
    assert pp >= tight


def test_capacity_resolution(llama8b, v6e, chat_workload):
    slo = slo_threshold(llama8b, v6e)
    res = capacity_search(llama8b, v6e, chat_workload, PACKING, slo)
    feasible = [p.rate for p in res.probes if p.feasible]
    infeasible = [p.rate for p in res.probes if not p.feasible]
    assert res.qps == max(feasible)
    assert min(r for r in infeasible if r > res.qps) - res.qps <= 0.05


def test_bandwidth_savings_trivial_and_monotone(llama8b, v6e, chat_workload):
    slo = slo_threshold(llama8b, v6e)
    assert bandwidth_savings(llama8b, v6e, chat_workload, 0.0, slo).scale == 1.0
    cap = capacity_search(llama8b, v6e, chat_workload, PACKING_PREFETCH, slo).qps
    scales = [bandwidth_savings(llama8b, v6e, chat_workload, f * cap, slo).scale for f in (0.5, 1.0)]
    assert scales[0] <= scales[1]
    assert all(math.isfinite(s) and 1.0 <= s <= 64 for s in scales)
