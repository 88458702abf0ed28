"""Iteration-granular serving loop, P99 metrics, SLO capacity and bandwidth-savings searches."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .datasets import Workload
from .hardware import HardwareSpec
from .scheduler import DECODING, DONE, QUEUED, PackedBatch, Request, advance, form_batch
from .stage import PACKING, PACKING_PREFETCH, Policy, simulate_iteration
from .workload import ModelSpec, kv_bytes, model_weight_bytes

log = logging.getLogger(__name__)


class SloUnreachable(RuntimeError):
    pass


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the value at rank ceil(p * n) of the sorted samples."""
    if not samples:
        raise ValueError("percentile of an empty sample list")
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    return sorted(samples)[_rank(p, len(samples)) - 1]


def _rank(p: float, n: int) -> int:
    # round() guards against p * n landing a hair above an integer
    return max(1, math.ceil(round(p * n, 9)))


@dataclass
class ServiceConfig:
    chunk_size: int = 512
    max_decode: int = 32
    budget_counts_decode: bool = True
    warmup_fraction: float = 0.05


@dataclass
class ServiceMetrics:
    ttft_samples: list[float] = field(default_factory=list)
    tbt_samples: list[float] = field(default_factory=list)
    sched_delay_samples: list[float] = field(default_factory=list)
    p99_tbt: Optional[float] = None
    p99_sched_delay: Optional[float] = None
    achieved_qps: float = 0.0
    avg_hbm_bw_used: float = 0.0
    completed: int = 0
    span: float = 0.0
    iterations: int = 0
    mean_concurrency: float = 0.0
    max_resident_kv_bytes: int = 0
    kv_capacity_violated: bool = False
    aborted: bool = False

    def summary(self) -> dict:
        def ms(x):
            return None if x is None else round(x * 1e3, 3)

        return {
            "completed": self.completed,
            "iterations": self.iterations,
            "achieved_qps": round(self.achieved_qps, 6),
            "p99_tbt_ms": ms(self.p99_tbt),
            "p99_sched_delay_ms": ms(self.p99_sched_delay),
            "p99_ttft_ms": ms(percentile(self.ttft_samples, 0.99)) if self.ttft_samples else None,
            "avg_hbm_bw_used_gbps": round(self.avg_hbm_bw_used / 1e9, 3),
            "span_s": round(self.span, 6),
            "max_resident_kv_bytes": self.max_resident_kv_bytes,
            "kv_capacity_violated": self.kv_capacity_violated,
            "aborted": self.aborted,
        }


@dataclass(frozen=True)
class SloLimits:
    """Early-exit thresholds: stop as soon as a P99 bound can no longer hold."""

    tbt: float
    sched_delay: float = 1.0


def run(
    spec: ModelSpec,
    hw: HardwareSpec,
    requests: Sequence[Request],
    policy: Policy = PACKING_PREFETCH,
    config: Optional[ServiceConfig] = None,
    limits: Optional[SloLimits] = None,
) -> ServiceMetrics:
    """Serve ``requests`` to completion, one packed iteration per event.

    Samples from the first ``warmup_fraction`` of requests (by arrival) are
    excluded from the metrics. With ``limits`` the run stops once more than 1 %
    of the kept TBT or scheduling-delay samples are certain to exceed them; the
    returned metrics are then flagged ``aborted``.
    """
    cfg = config or ServiceConfig()
    metrics = ServiceMetrics()
    if not requests:
        return metrics
    if any(r.state != QUEUED or r.prefill_progress or r.tbt_samples for r in requests):
        raise ValueError("run() needs fresh requests; build a new request list per run")
    reqs = sorted(requests, key=lambda r: (r.arrival_time, r.id))
    by_id = {r.id: r for r in reqs}
    warm = set(r.id for r in reqs[:int(cfg.warmup_fraction * len(reqs))])
    kept = [r for r in reqs if r.id not in warm]
    n_tbt = sum(r.output_len - 1 for r in kept)
    allowed_tbt = n_tbt - _rank(0.99, n_tbt) if n_tbt else 0
    allowed_delay = len(kept) - _rank(0.99, len(kept)) if kept else 0
    tbt_viol = delay_viol = 0

    kv_budget = hw.hbm_capacity - model_weight_bytes(spec)
    kv_per_token = spec.num_layers * kv_bytes(1, spec)

    clock = reqs[0].arrival_time
    start = clock
    nxt = 0
    queue: deque[Request] = deque()
    running: list[Request] = []
    hbm_bytes = 0
    busy_weighted = 0.0
    finished_time = clock
    while metrics.completed < len(reqs):
        while nxt < len(reqs) and reqs[nxt].arrival_time <= clock:
            queue.append(reqs[nxt])
            nxt += 1
        if not queue and not running:
            clock = reqs[nxt].arrival_time
            continue
        batch = form_batch(running, queue, cfg.chunk_size, cfg.max_decode,
                           cfg.budget_counts_decode, policy.packing)
        for rid in batch.request_ids:
            req = by_id[rid]
            if req.first_scheduled_time is None:
                req.first_scheduled_time = clock
                if rid not in warm:
                    delay = clock - req.arrival_time
                    metrics.sched_delay_samples.append(delay)
                    if limits is not None and delay > limits.sched_delay:
                        delay_viol += 1
        resident = sum(r.kv_len for r in running) * kv_per_token
        metrics.max_resident_kv_bytes = max(metrics.max_resident_kv_bytes, resident)

        report = simulate_iteration(spec, hw, batch, policy, record=False)
        latency = report.total_latency
        clock += latency
        hbm_bytes += report.hbm_bytes_total
        busy_weighted += latency * (len(queue) + len(running))
        metrics.iterations += 1

        decode_ids = [rid for rid, _ in batch.decode_members]
        for req in advance(batch, by_id, clock):
            metrics.completed += 1
            finished_time = clock
        for rid, _, _ in batch.prefill_slices:
            req = by_id[rid]
            if req.first_token_time == clock and rid not in warm:
                metrics.ttft_samples.append(req.ttft)
        for rid in decode_ids:
            if rid in warm:
                continue
            sample = by_id[rid].tbt_samples[-1]
            metrics.tbt_samples.append(sample)
            if limits is not None and sample > limits.tbt:
                tbt_viol += 1
        while queue and queue[0].state in (DECODING, DONE):
            req = queue.popleft()
            if req.state == DECODING:
                running.append(req)
        if any(r.state == DONE for r in running):
            running = [r for r in running if r.state != DONE]

        if limits is not None and (tbt_viol > allowed_tbt or delay_viol > allowed_delay):
            metrics.aborted = True
            break

    metrics.span = finished_time - start
    if metrics.span > 0:
        metrics.achieved_qps = metrics.completed / metrics.span
        metrics.avg_hbm_bw_used = hbm_bytes / metrics.span
        metrics.mean_concurrency = busy_weighted / metrics.span
    metrics.kv_capacity_violated = metrics.max_resident_kv_bytes > kv_budget
    if metrics.tbt_samples:
        metrics.p99_tbt = percentile(metrics.tbt_samples, 0.99)
    if metrics.sched_delay_samples:
        metrics.p99_sched_delay = percentile(metrics.sched_delay_samples, 0.99)
    return metrics


def slo_threshold(spec: ModelSpec, hw: HardwareSpec, num_decode: int = 32, kv_len: int = 4096) -> float:
    """Packing-prefetch latency of one decode iteration over ``num_decode`` requests at ``kv_len``."""
    batch = PackedBatch(decode_members=tuple((i, kv_len) for i in range(num_decode)))
    return simulate_iteration(spec, hw, batch, PACKING_PREFETCH, record=False).total_latency


def best_case_tbt(spec: ModelSpec, hw: HardwareSpec) -> float:
    """Lower bound on any TBT sample: a lone decode token over a one-token context."""
    batch = PackedBatch(decode_members=((0, 1),))
    return simulate_iteration(spec, hw, batch, PACKING, record=False).total_latency


@dataclass
class Probe:
    rate: float
    feasible: bool
    p99_tbt: Optional[float]
    p99_sched_delay: Optional[float]
    achieved_qps: float
    aborted: bool


@dataclass
class CapacityResult:
    qps: float
    policy: str
    slo_tbt: float
    slo_delay: float
    probes: list[Probe] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "qps": round(self.qps, 4),
            "slo_tbt_ms": round(self.slo_tbt * 1e3, 3),
            "slo_delay_ms": round(self.slo_delay * 1e3, 3),
            "probes": [
                {"rate": round(p.rate, 6), "feasible": p.feasible,
                 "p99_tbt_ms": None if p.p99_tbt is None else round(p.p99_tbt * 1e3, 3),
                 "p99_sched_delay_ms": None if p.p99_sched_delay is None else round(p.p99_sched_delay * 1e3, 3),
                 "aborted": p.aborted}
                for p in self.probes
            ],
        }


def probe(
    spec: ModelSpec,
    hw: HardwareSpec,
    workload: Workload,
    policy: Policy,
    rate: float,
    slo_tbt: float,
    slo_delay: float = 1.0,
    config: Optional[ServiceConfig] = None,
) -> Probe:
    """One fixed-seed run at ``rate``; feasible iff both P99 bounds hold."""
    m = run(spec, hw, workload.requests(rate), policy, config, SloLimits(slo_tbt, slo_delay))
    ok = (not m.aborted
          and (m.p99_tbt is None or m.p99_tbt <= slo_tbt)
          and (m.p99_sched_delay is None or m.p99_sched_delay <= slo_delay))
    return Probe(rate, ok, m.p99_tbt, m.p99_sched_delay, m.achieved_qps, m.aborted)


def capacity_search(
    spec: ModelSpec,
    hw: HardwareSpec,
    workload: Workload,
    policy: Policy,
    slo_tbt: float,
    slo_delay: float = 1.0,
    config: Optional[ServiceConfig] = None,
    resolution: float = 0.05,
    initial_rate: float = 1.0,
    max_rate: float = 1024.0,
) -> CapacityResult:
    """Largest Poisson arrival rate meeting both P99 SLOs, to ``resolution`` QPS.

    The upper bracket doubles from ``initial_rate`` until a probe fails, then
    the bracket is bisected. Every probe reuses the same workload draws.
    """
    if slo_tbt <= 0 or slo_delay <= 0:
        raise ValueError("SLO values must be > 0")
    floor = best_case_tbt(spec, hw)
    if slo_tbt < floor:
        raise SloUnreachable(f"SLO unreachable: TBT SLO {slo_tbt * 1e3:.3f} ms is below the "
                             f"best-case decode iteration {floor * 1e3:.3f} ms")
    result = CapacityResult(0.0, policy.name, slo_tbt, slo_delay)

    def feasible(rate: float) -> bool:
        p = probe(spec, hw, workload, policy, rate, slo_tbt, slo_delay, config)
        result.probes.append(p)
        log.debug("%s rate=%.4f feasible=%s p99_tbt=%s", policy.name, rate, p.feasible, p.p99_tbt)
        return p.feasible

    lo, hi = 0.0, initial_rate
    while feasible(hi):
        lo = hi
        if hi >= max_rate:
            result.qps = hi
            return result
        hi = min(2 * hi, max_rate)
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    if lo == 0.0:
        raise SloUnreachable(f"SLO unreachable: infeasible even at {hi:.4f} QPS")
    result.qps = lo
    return result


@dataclass
class BandwidthSavings:
    scale: float
    target_qps: float
    saturated: bool
    probes: list[tuple[float, bool]] = field(default_factory=list)


def bandwidth_savings(
    spec: ModelSpec,
    hw: HardwareSpec,
    workload: Workload,
    target_qps: float,
    slo_tbt: float,
    slo_delay: float = 1.0,
    config: Optional[ServiceConfig] = None,
    max_scale: float = 64.0,
    rel_tol: float = 0.01,
) -> BandwidthSavings:
    """HBM bandwidth multiplier packing-only needs to sustain ``target_qps`` under the SLOs.

    Bisects ``bw_scale`` geometrically in [1, max_scale]; a scale qualifies when a
    packing-only probe at ``target_qps`` is feasible.
    """
    out = BandwidthSavings(1.0, target_qps, False)
    if target_qps <= 0:
        return out

    def ok(scale: float) -> bool:
        p = probe(spec, hw.with_bw_scale(scale), workload, PACKING, target_qps, slo_tbt, slo_delay, config)
        out.probes.append((scale, p.feasible))
        return p.feasible

    if ok(1.0):
        return out
    if not ok(max_scale):
        out.scale, out.saturated = max_scale, True
        return out
    lo, hi = 1.0, max_scale
    while hi / lo > 1 + rel_tol:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    out.scale = hi
    return out
