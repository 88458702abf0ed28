"""Analytic TPU-like accelerator model: tile-quantized GEMM time, HBM transfer, roofline stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

from ._toml import load_toml
from .workload import (
    Attention,
    ConfigError,
    Gemm,
    ModelSpec,
    OperationDescriptor,
    OpKind,
    attention_cost,
    op_input_bytes,
    op_output_bytes,
)

MiB = 1 << 20
GiB = 1 << 30


def clock_from_peak(peak_flops: float, tm: int, tn: int, td: int) -> float:
    """Clock frequency implied by a peak FP16 rate and the systolic array shape."""
    if min(tm, tn, td) < 1:
        raise ValueError("systolic dims must be >= 1")
    return peak_flops / (2 * tm * tn * td)


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_flops: float
    systolic: tuple[int, int, int]
    vector: tuple[int, int, int]
    compute_buffer_bytes: int
    prefetch_buffer_bytes: int
    hbm_bandwidth: float
    hbm_capacity: int
    bw_scale: float = 1.0
    # "vector" or "systolic"
    decode_attention_unit: str = "vector"

    def __post_init__(self) -> None:
        if self.peak_flops <= 0 or self.hbm_bandwidth <= 0 or self.bw_scale <= 0:
            raise ConfigError(f"{self.name}: peak_flops, hbm_bandwidth and bw_scale must be > 0")
        if self.compute_buffer_bytes <= 0 or self.hbm_capacity <= 0:
            raise ConfigError(f"{self.name}: compute buffer and HBM capacity must be > 0")
        if self.prefetch_buffer_bytes < 0:
            raise ConfigError(f"{self.name}: prefetch_buffer_bytes must be >= 0")
        if len(self.systolic) != 3 or min(self.systolic) < 1:
            raise ConfigError(f"{self.name}: systolic must be three positive dims")
        if len(self.vector) != 3 or min(self.vector) < 1:
            raise ConfigError(f"{self.name}: vector must be three positive dims")
        if self.decode_attention_unit not in ("vector", "systolic"):
            raise ConfigError(f"{self.name}: decode_attention_unit must be 'vector' or 'systolic'")

    @property
    def clock_hz(self) -> float:
        return clock_from_peak(self.peak_flops, *self.systolic)

    @property
    def peak_vector_flops(self) -> float:
        a, b, c = self.vector
        return 2 * a * b * c * self.clock_hz

    @property
    def effective_bandwidth(self) -> float:
        return self.hbm_bandwidth * self.bw_scale

    def with_prefetch_buffer(self, nbytes: int) -> "HardwareSpec":
        return replace(self, prefetch_buffer_bytes=int(nbytes))

    def with_bw_scale(self, scale: float) -> "HardwareSpec":
        return replace(self, bw_scale=float(scale))

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareSpec":
        body = data.get("hardware", data)
        try:
            return cls(
                name=body["name"],
                peak_flops=float(body["peak_tflops"]) * 1e12,
                systolic=tuple(body["systolic"]),
                vector=tuple(body["vector"]),
                compute_buffer_bytes=int(body["compute_buffer_mib"] * MiB),
                prefetch_buffer_bytes=int(body["prefetch_buffer_mib"] * MiB),
                hbm_bandwidth=float(body["hbm_bandwidth_tbps"]) * 1e12,
                hbm_capacity=int(body["hbm_capacity_gib"] * GiB),
                bw_scale=float(body.get("bw_scale", 1.0)),
                decode_attention_unit=body.get("decode_attention_unit", "vector"),
            )
        except KeyError as exc:
            raise ConfigError(f"hardware config missing key {exc.args[0]!r}") from None

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "HardwareSpec":
        return cls.from_dict(load_toml(path))


@dataclass(frozen=True)
class StageCost:
    compute_time: float
    mandatory_transfer_time: float
    latency: float
    hbm_bytes: int

    @property
    def residual_time(self) -> float:
        return self.latency - self.mandatory_transfer_time


def _padded(x: int, tile: int) -> int:
    return -(-x // tile) * tile


def gemm_compute_time(m: int, k: int, n: int, hw: HardwareSpec) -> float:
    """Systolic time with m, n padded to the array edges and k to its depth."""
    if min(m, k, n) < 1:
        raise ValueError(f"GEMM dims must be >= 1, got ({m}, {k}, {n})")
    tm, tn, td = hw.systolic
    return 2 * _padded(m, tm) * _padded(n, tn) * _padded(k, td) / hw.peak_flops


def vector_compute_time(flops: float, hw: HardwareSpec) -> float:
    if flops < 0:
        raise ValueError("flops must be >= 0")
    return flops / hw.peak_vector_flops


def transfer_time(nbytes: float, hw: HardwareSpec) -> float:
    if nbytes < 0:
        raise ValueError("bytes must be >= 0")
    return nbytes / hw.effective_bandwidth


def attention_compute_time(kind: Attention, spec: ModelSpec, hw: HardwareSpec) -> float:
    if kind.phase == "decode" and hw.decode_attention_unit == "vector":
        return vector_compute_time(attention_cost("decode", 1, kind.kv_len, spec).flops, hw)
    # per-head QK^T then PV, batched over heads on the systolic array
    q, kv, dh = kind.q_len, kind.kv_len, spec.head_dim
    per_head = gemm_compute_time(q, dh, kv, hw) + gemm_compute_time(q, kv, dh, hw)
    return spec.num_heads * per_head


def compute_time(kind: OpKind, spec: ModelSpec, hw: HardwareSpec) -> float:
    if isinstance(kind, Gemm):
        return gemm_compute_time(kind.m, kind.k, kind.n, hw)
    return attention_compute_time(kind, spec, hw)


def op_hbm_bytes(kind: OpKind, spec: ModelSpec) -> int:
    """All HBM bytes an op moves when nothing is fused or prefetched."""
    b = spec.bytes_per_value
    if isinstance(kind, Gemm):
        return kind.input_bytes(b) + kind.weight_bytes(b) + kind.output_bytes(b)
    cost = attention_cost(kind.phase, kind.q_len, kind.kv_len, spec)
    return cost.hbm_read_bytes + cost.hbm_write_bytes + cost.kv_write_bytes


def prefetchable_bytes(kind: OpKind, spec: ModelSpec) -> int:
    """KV bytes that may be staged ahead of time (decode attention only)."""
    if isinstance(kind, Attention) and kind.phase == "decode":
        return attention_cost("decode", 1, kind.kv_len, spec).kv_read_bytes
    return 0


def _fusable(prev: OpKind, spec: ModelSpec, hw: HardwareSpec) -> bool:
    return op_output_bytes(prev, spec) <= hw.compute_buffer_bytes // 2


def fused_read_bytes(prev: Optional[OpKind], kind: OpKind, spec: ModelSpec, hw: HardwareSpec) -> int:
    """Input bytes of ``kind`` that stay on-chip because ``prev`` kept its output there."""
    if prev is None or not _fusable(prev, spec, hw):
        return 0
    return min(op_output_bytes(prev, spec), op_input_bytes(kind, spec))


def fused_write_bytes(kind: OpKind, next_kind: Optional[OpKind], spec: ModelSpec, hw: HardwareSpec) -> int:
    """Output bytes of ``kind`` never written back because ``next_kind`` consumes them on-chip."""
    if next_kind is None or not _fusable(kind, spec, hw):
        return 0
    return op_output_bytes(kind, spec)


def fusion_elided_bytes(
    prev_op: Optional[OperationDescriptor],
    op: OperationDescriptor,
    hw: HardwareSpec,
    spec: ModelSpec,
) -> int:
    """HBM bytes saved by fusing two adjacent ops: prev's writeback plus op's matching read."""
    if prev_op is None:
        return 0
    return (fused_write_bytes(prev_op.kind, op.kind, spec, hw)
            + fused_read_bytes(prev_op.kind, op.kind, spec, hw))


def stage_cost(
    op: Union[OperationDescriptor, OpKind],
    spec: ModelSpec,
    hw: HardwareSpec,
    prefetched_kv_bytes: int = 0,
    prev: Optional[Union[OperationDescriptor, OpKind]] = None,
    next_op: Optional[Union[OperationDescriptor, OpKind]] = None,
) -> StageCost:
    """Roofline latency of one op under ideal double buffering.

    Bytes already staged in the prefetch buffer and bytes kept on-chip by fusion
    with ``prev``/``next_op`` are removed from the mandatory transfer.
    """
    kind = _kind(op)
    limit = prefetchable_bytes(kind, spec)
    if prefetched_kv_bytes < 0 or prefetched_kv_bytes > limit:
        raise ValueError(f"prefetched_kv_bytes={prefetched_kv_bytes} outside [0, {limit}] for {kind}")
    elided = (fused_read_bytes(_kind(prev), kind, spec, hw)
              + fused_write_bytes(kind, _kind(next_op), spec, hw))
    nbytes = op_hbm_bytes(kind, spec) - elided - prefetched_kv_bytes
    return make_stage_cost(compute_time(kind, spec, hw), nbytes, hw)


def make_stage_cost(compute: float, mandatory_bytes: int, hw: HardwareSpec) -> StageCost:
    transfer = transfer_time(mandatory_bytes, hw)
    return StageCost(compute, transfer, max(compute, transfer), mandatory_bytes)


def _kind(op):
    if op is None:
        return None
    return op.kind if isinstance(op, OperationDescriptor) else op


def residual_budget_bytes(cost: StageCost, hw: HardwareSpec) -> int:
    """Whole bytes the idle HBM can move while a stage is compute-bound."""
    slack = cost.latency - cost.mandatory_transfer_time
    if slack <= 0:
        return 0
    return math.floor(slack * hw.effective_bandwidth)
