"""Layer-by-layer simulation of one packed iteration with KV-cache prefetch.

Within every stage the HBM first carries the stage's own operands; whatever
time is left while the compute units are still busy is spent staging KV data
of upcoming decode attentions into the prefetch buffer, nearest first.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

from .hardware import (
    HardwareSpec,
    StageCost,
    compute_time,
    fused_read_bytes,
    fused_write_bytes,
    make_stage_cost,
    op_hbm_bytes,
    prefetchable_bytes,
    residual_budget_bytes,
)
from .scheduler import PackedBatch, decode_batch
from .workload import (
    Attention,
    Gemm,
    ModelSpec,
    OperationDescriptor,
    embedding_kinds,
    kv_bytes,
    layer_kinds,
    op_output_bytes,
)

PrefetchKey = tuple[int, int]  # (request id, layer)


@dataclass(frozen=True)
class Policy:
    packing: bool = True
    prefetch: bool = False

    @property
    def name(self) -> str:
        if not self.packing:
            return "serial"
        return "packing-prefetch" if self.prefetch else "packing"


SERIAL = Policy(packing=False, prefetch=False)
PACKING = Policy(packing=True, prefetch=False)
PACKING_PREFETCH = Policy(packing=True, prefetch=True)
POLICIES = {p.name: p for p in (SERIAL, PACKING, PACKING_PREFETCH)}


class PrefetchBuffer:
    """On-chip staging area for KV bytes of not-yet-executed decode attentions."""

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.entries: dict[PrefetchKey, int] = {}
        self.occupied = 0
        self.peak = 0

    @property
    def free(self) -> int:
        return self.capacity - self.occupied

    def staged(self, key: PrefetchKey) -> int:
        return self.entries.get(key, 0)

    def stage(self, key: PrefetchKey, nbytes: int) -> None:
        if nbytes <= 0:
            raise ValueError("staged bytes must be positive")
        if nbytes > self.free:
            raise ValueError(f"staging {nbytes} B overflows buffer ({self.free} B free)")
        self.entries[key] = self.entries.get(key, 0) + nbytes
        self.occupied += nbytes
        if self.occupied > self.peak:
            self.peak = self.occupied

    def release(self, key: PrefetchKey) -> int:
        nbytes = self.entries.pop(key, 0)
        self.occupied -= nbytes
        return nbytes


def allocate_prefetch(
    budget_bytes: int,
    pending: Iterable[tuple[PrefetchKey, int]],
    buffer: PrefetchBuffer,
) -> list[tuple[PrefetchKey, int]]:
    """Greedy, execution-ordered staging of pending decode-attention KV bytes.

    ``pending`` yields ``(key, kv_read_bytes)``; each op gets
    ``min(remaining budget, free buffer, its un-staged bytes)``.
    """
    if budget_bytes < 0:
        raise ValueError("budget must be >= 0")
    assignments = []
    for key, total in pending:
        if budget_bytes <= 0 or buffer.free <= 0:
            break
        need = total - buffer.staged(key)
        if need <= 0:
            continue
        amount = min(budget_bytes, buffer.free, need)
        buffer.stage(key, amount)
        budget_bytes -= amount
        assignments.append((key, amount))
    return assignments


@dataclass(frozen=True)
class StageRecord:
    descriptor: OperationDescriptor
    cost: StageCost
    prefetched_bytes: int = 0
    budget_bytes: int = 0
    prefetch_issued: tuple[tuple[PrefetchKey, int], ...] = ()
    occupancy_after: int = 0


@dataclass
class IterationReport:
    total_latency: float
    decode_attributable_latency: float
    hbm_bytes_total: int
    peak_prefetch_occupancy: int
    num_tokens: int
    num_decode: int
    stages: list[StageRecord] = field(default_factory=list)
    steady_from_layer: Optional[int] = None

    def to_dict(self, include_stages: bool = True) -> dict:
        out = {
            "total_latency_ms": round(self.total_latency * 1e3, 6),
            "decode_attributable_latency_ms": round(self.decode_attributable_latency * 1e3, 6),
            "hbm_bytes_total": self.hbm_bytes_total,
            "peak_prefetch_occupancy": self.peak_prefetch_occupancy,
            "num_tokens": self.num_tokens,
            "num_decode": self.num_decode,
        }
        if include_stages:
            out["stages"] = [stage_row(s) for s in self.stages]
        return out


def stage_row(record: StageRecord) -> dict:
    d = record.descriptor
    kind = d.kind
    row = {
        "sequence_index": d.sequence_index,
        "layer": d.layer,
        "op": kind.name,
        "compute_ms": record.cost.compute_time * 1e3,
        "transfer_ms": record.cost.mandatory_transfer_time * 1e3,
        "latency_ms": record.cost.latency * 1e3,
        "hbm_bytes": record.cost.hbm_bytes,
        "prefetched_bytes": record.prefetched_bytes,
        "prefetch_issued_bytes": sum(b for _, b in record.prefetch_issued),
        "occupancy_after": record.occupancy_after,
    }
    if isinstance(kind, Gemm):
        row.update(m=kind.m, k=kind.k, n=kind.n)
    else:
        row.update(owner=kind.owner, q_len=kind.q_len, kv_len=kind.kv_len)
    return row


@dataclass(frozen=True)
class _Slot:
    """Layer-invariant cost data for one position of the per-layer op template."""

    kind: object
    compute: float
    base_bytes: int  # mandatory bytes with nothing prefetched, fusion applied
    kv_bytes: int  # prefetchable bytes (decode attention only)
    member: int  # decode member index, -1 otherwise
    linear: bool
    cost: StageCost


def _slot(kind, prev, nxt, spec, hw, member) -> _Slot:
    base = (op_hbm_bytes(kind, spec)
            - fused_read_bytes(prev, kind, spec, hw)
            - fused_write_bytes(kind, nxt, spec, hw))
    c = compute_time(kind, spec, hw)
    return _Slot(kind, c, base, prefetchable_bytes(kind, spec), member,
                 isinstance(kind, Gemm), make_stage_cost(c, base, hw))


def _decode_slots(kinds, first: int, spec: ModelSpec, hw: HardwareSpec) -> list[_Slot]:
    """Decode-attention slots by direct arithmetic; the serving loop's hot path.

    Same numbers as :func:`_slot`: each op moves KV + Q in, output + one token
    of K/V out, minus Q taken on-chip from a fusable predecessor and the output
    kept on-chip for its successor.
    """
    b = spec.bytes_per_value
    q_bytes = spec.q_width * b
    kv_token = 2 * spec.kv_width * b
    half_buffer = hw.compute_buffer_bytes // 2
    prev_out = op_output_bytes(kinds[first - 1], spec)
    first_read = min(prev_out, q_bytes) if prev_out <= half_buffer else 0
    chained = q_bytes if q_bytes <= half_buffer else 0
    flop_scale = 4 * spec.num_heads * spec.head_dim
    out = []
    for j, kind in enumerate(kinds[first:]):
        if not isinstance(kind, Attention):
            break
        kv = kv_token * kind.kv_len
        base = kv + 2 * q_bytes + kv_token - (first_read if j == 0 else chained) - chained
        if hw.decode_attention_unit == "vector":
            c = flop_scale * kind.kv_len / hw.peak_vector_flops
        else:
            c = compute_time(kind, spec, hw)
        out.append(_Slot(kind, c, base, kv, j, False, make_stage_cost(c, base, hw)))
    return out


def simulate_iteration(
    spec: ModelSpec,
    hw: HardwareSpec,
    batch: PackedBatch,
    policy: Policy = PACKING_PREFETCH,
    record: bool = True,
) -> IterationReport:
    """Walk one packed iteration stage by stage.

    With ``record=False`` per-stage records are skipped and, once the prefetch
    state at a layer boundary repeats, the remaining layers are extrapolated;
    every decoder layer has the same op template so the repeat is exact.
    """
    if batch.is_empty:
        raise ValueError("cannot simulate an empty batch")
    if not policy.packing and batch.decode_members and batch.prefill_slices:
        raise ValueError("serial policy cannot execute a mixed prefill/decode batch")

    embed_kind, head_kind = embedding_kinds(spec, batch)
    kinds = layer_kinds(spec, batch)
    members = batch.decode_members
    nd = len(members)
    n_layers = spec.num_layers
    # decoder layers are preceded by embed/ffn_down and followed by qkv/lm_head;
    # both neighbours have identical activation shapes, so one template serves all
    slots = []
    n_prefill = len(batch.prefill_slices)
    first_decode = 1 + n_prefill
    for i, kind in enumerate(kinds):
        if first_decode <= i < first_decode + nd:
            continue
        prev = kinds[i - 1] if i > 0 else kinds[-1]
        nxt = kinds[i + 1] if i + 1 < len(kinds) else kinds[0]
        slots.append(_slot(kind, prev, nxt, spec, hw, -1))
    slots[first_decode:first_decode] = _decode_slots(kinds, first_decode, spec, hw)
    embed = _slot(embed_kind, None, kinds[0], spec, hw, -1)
    head = _slot(head_kind, kinds[-1], None, spec, hw, -1)

    capacity = hw.prefetch_buffer_bytes if policy.prefetch else 0
    buffer = PrefetchBuffer(capacity)
    need = [kv_bytes(kv, spec) for _, kv in members]
    total_pending = n_layers * nd
    cursor = 0  # flattened (layer * nd + member) index of the first not-fully-staged pending op

    def pending_from(start: int) -> Iterator[tuple[PrefetchKey, int]]:
        for g in range(start, total_pending):
            layer, j = divmod(g, nd)
            yield (members[j][0], layer), need[j]

    def prefetch(cost: StageCost, after: int) -> tuple[int, tuple]:
        nonlocal cursor
        cursor = max(cursor, after)
        if not capacity or cursor >= total_pending or buffer.free <= 0:
            return 0, ()
        budget = residual_budget_bytes(cost, hw)
        if budget <= 0:
            return 0, ()
        issued = allocate_prefetch(budget, pending_from(cursor), buffer)
        while cursor < total_pending:
            layer, j = divmod(cursor, nd)
            if buffer.staged((members[j][0], layer)) < need[j]:
                break
            cursor += 1
        return budget, tuple(issued)

    records: list[StageRecord] = []
    seq = itertools.count()
    decode_share = nd / batch.num_tokens

    def run_linear(slot: _Slot, layer: int, after: int) -> tuple[float, float]:
        budget, issued = prefetch(slot.cost, after)
        if record:
            desc = OperationDescriptor(slot.kind, layer, next(seq))
            records.append(StageRecord(desc, slot.cost, 0, budget, issued, buffer.occupied))
        lat = slot.cost.latency
        return lat, lat * decode_share if slot.linear else 0.0

    total = 0.0
    attributable = 0.0
    lat, attr = run_linear(embed, -1, 0)
    total += lat
    attributable += attr

    layer_totals: list[float] = []
    layer_attr: list[float] = []
    boundary_states: list[tuple[int, int]] = []
    steady_from = None
    layer = 0
    while layer < n_layers:
        state = (cursor - layer * nd, _partial(buffer, members, cursor, nd, total_pending))
        if not record and boundary_states and boundary_states[-1] == state:
            steady_from = layer
            remaining = n_layers - layer
            total += remaining * layer_totals[-1]
            attributable += remaining * layer_attr[-1]
            break
        boundary_states.append(state)
        first_g = layer * nd
        l_total = 0.0
        l_attr = 0.0
        for slot in slots:
            if slot.member < 0:
                lat, attr = run_linear(slot, layer, first_g)
                l_total += lat
                l_attr += attr
                continue
            g = first_g + slot.member
            key = (members[slot.member][0], layer)
            staged = buffer.staged(key)
            cost = make_stage_cost(slot.compute, slot.base_bytes - staged, hw)
            budget, issued = prefetch(cost, g + 1)
            if record:
                desc = OperationDescriptor(slot.kind, layer, next(seq))
                buffer_after = buffer.occupied - staged
                records.append(StageRecord(desc, cost, staged, budget, issued, buffer_after))
            buffer.release(key)
            l_total += cost.latency
            l_attr += cost.latency
        layer_totals.append(l_total)
        layer_attr.append(l_attr)
        total += l_total
        attributable += l_attr
        layer += 1

    lat, attr = run_linear(head, n_layers, total_pending)
    total += lat
    attributable += attr

    hbm_total = (embed.base_bytes + head.base_bytes
                 + n_layers * sum(s.base_bytes for s in slots))
    return IterationReport(
        total_latency=total,
        decode_attributable_latency=attributable,
        hbm_bytes_total=hbm_total,
        peak_prefetch_occupancy=buffer.peak,
        num_tokens=batch.num_tokens,
        num_decode=nd,
        stages=records,
        steady_from_layer=steady_from,
    )


def _partial(buffer: PrefetchBuffer, members, cursor: int, nd: int, total_pending: int) -> int:
    if cursor >= total_pending:
        return 0
    layer, j = divmod(cursor, nd)
    return buffer.staged((members[j][0], layer))


def decode_attributable_latency(
    report: IterationReport,
    batch: PackedBatch,
    mode: str = "proportional",
) -> float:
    """Share of an iteration charged to its decode tokens.

    ``proportional``: every decode attention stage in full plus each GEMM stage
    scaled by decode tokens / GEMM rows. ``attention-only`` drops the GEMM share.
    """
    if mode not in ("proportional", "attention-only"):
        raise ValueError(f"unknown attribution mode {mode!r}")
    if not report.stages:
        raise ValueError("report has no stage records (simulate with record=True)")
    nd = batch.num_decode
    total = 0.0
    for rec in report.stages:
        kind = rec.descriptor.kind
        if isinstance(kind, Attention):
            if kind.phase == "decode":
                total += rec.cost.latency
        elif mode == "proportional":
            total += rec.cost.latency * nd / kind.m
    return total


def _prefill_batch(prefill_tokens: int, rid: int) -> PackedBatch:
    return PackedBatch(prefill_slices=((rid, 0, prefill_tokens),))


def serial_parts(
    spec: ModelSpec,
    hw: HardwareSpec,
    prefill_tokens: int,
    decode_members: Sequence[tuple[int, int]],
) -> tuple[float, float]:
    """(prefill latency, decode latency) of back-to-back unpacked iterations."""
    prefill = 0.0
    if prefill_tokens > 0:
        prefill = simulate_iteration(spec, hw, _prefill_batch(prefill_tokens, -1), SERIAL,
                                     record=False).total_latency
    decode = 0.0
    if decode_members:
        decode = simulate_iteration(spec, hw, PackedBatch(decode_members=tuple(decode_members)),
                                    SERIAL, record=False).total_latency
    return prefill, decode


def simulate_serial(
    spec: ModelSpec,
    hw: HardwareSpec,
    prefill_tokens: int,
    decode_members: Sequence[tuple[int, int]],
) -> float:
    """Prefill followed by decode, no packing and no prefetch."""
    prefill, decode = serial_parts(spec, hw, prefill_tokens, decode_members)
    return prefill + decode


@dataclass(frozen=True)
class GridCell:
    prefill_tokens: int
    kv_tokens: int
    buffer_bytes: int
    policy: str
    decode_speedup: float
    overall_speedup: float
    serial_decode_s: float
    serial_total_s: float
    packed_decode_s: float
    packed_total_s: float


def packed_stage_batch(prefill_tokens: int, kv_tokens: int, decode_requests: int) -> PackedBatch:
    members = decode_batch(kv_tokens, decode_requests)
    slices = ((len(members), 0, prefill_tokens),) if prefill_tokens > 0 else ()
    return PackedBatch(decode_members=members, prefill_slices=slices)


def speedup_grid(
    spec: ModelSpec,
    hw: HardwareSpec,
    prefill_token_list: Sequence[int],
    kv_token_list: Sequence[int],
    buffer_size_list: Sequence[int],
    decode_requests: int = 128,
    attribution: str = "proportional",
) -> list[GridCell]:
    """Decode and overall speedups of packing and packing-prefetch over serial execution.

    ``kv_token_list`` values are the summed KV length of one decode batch split
    across ``decode_requests`` members.
    """
    if not prefill_token_list or not kv_token_list or not buffer_size_list:
        raise ValueError("speedup grid axes must be nonempty")
    cells = []
    for prefill in prefill_token_list:
        for kv in kv_token_list:
            batch = packed_stage_batch(prefill, kv, decode_requests)
            serial_prefill, serial_decode = serial_parts(spec, hw, prefill, batch.decode_members)
            serial_total = serial_prefill + serial_decode
            for buf in buffer_size_list:
                for policy in (PACKING, PACKING_PREFETCH):
                    if policy.prefetch and buf > 0:
                        report = simulate_iteration(spec, hw.with_prefetch_buffer(buf), batch, policy)
                    else:
                        report = simulate_iteration(spec, hw, batch, PACKING)
                    decode = decode_attributable_latency(report, batch, attribution)
                    cells.append(GridCell(
                        prefill_tokens=prefill,
                        kv_tokens=kv,
                        buffer_bytes=buf,
                        policy=policy.name,
                        decode_speedup=serial_decode / decode,
                        overall_speedup=serial_total / report.total_latency,
                        serial_decode_s=serial_decode,
                        serial_total_s=serial_total,
                        packed_decode_s=decode,
                        packed_total_s=report.total_latency,
                    ))
    return cells
