import pytest

from packprefetch.hardware import (
    MiB,
    HardwareSpec,
    clock_from_peak,
    fusion_elided_bytes,
    gemm_compute_time,
    residual_budget_bytes,
    stage_cost,
    transfer_time,
    vector_compute_time,
)
from packprefetch.workload import Attention, ConfigError, Gemm, OperationDescriptor


def test_clock_from_peak(v6e, v7):
    assert clock_from_peak(918e12, 128, 128, 16) == pytest.approx(1.750946044921875e9, rel=1e-12)
    assert clock_from_peak(4614e12, 256, 256, 16) == pytest.approx(2.2001266479492188e9, rel=1e-12)
    assert clock_from_peak(2, 1, 1, 1) == 1
    for hw in (v6e, v7):
        tm, tn, td = hw.systolic
        assert 2 * tm * tn * td * hw.clock_hz == pytest.approx(hw.peak_flops, rel=1e-3)
    with pytest.raises(ValueError):
        clock_from_peak(1.0, 0, 1, 1)


def test_gemm_compute_time(v6e):
    assert gemm_compute_time(2048, 14336, 4096, v6e) == pytest.approx(262.00236228322444e-6, rel=1e-12)
    assert gemm_compute_time(2048, 14336, 4096, v6e) == pytest.approx(262.0e-6, rel=5e-3)
    assert gemm_compute_time(128, 16, 128, v6e) == pytest.approx(0.571e-9, rel=1e-3)
    gemv = gemm_compute_time(1, 4096, 4096, v6e)
    assert gemv == pytest.approx(128 * 2 * 4096 * 4096 / 918e12, rel=1e-12)


def test_vector_unit(v6e):
    assert v6e.peak_vector_flops == pytest.approx(114.75e12, rel=1e-9)
    assert vector_compute_time(2_147_483_648, v6e) == pytest.approx(18.72e-6, rel=1e-3)
    assert vector_compute_time(0, v6e) == 0


def test_transfer_time(v6e):
    assert transfer_time(536_870_912, v6e) == pytest.approx(327.360312195122e-6, rel=1e-12)
    assert transfer_time(0, v6e) == 0
    assert transfer_time(536_870_912, v6e.with_bw_scale(2)) == pytest.approx(163.7e-6, rel=1e-3)
    assert transfer_time(12345, v6e.with_bw_scale(2.5)) == transfer_time(12345, v6e) / 2.5


def test_decode_attention_stage(llama8b, v6e):
    attn = Attention("decode", 1, 131072, 0)
    full = stage_cost(attn, llama8b, v6e, prefetched_kv_bytes=536_870_912)
    assert full.latency == pytest.approx(18.72e-6, rel=1e-3)
    assert full.latency == full.compute_time
    assert full.hbm_bytes == 4096 * 2 * 2 + 2 * 1024 * 2  # Q in, output out, one token of K/V appended
    none = stage_cost(attn, llama8b, v6e)
    assert none.latency > transfer_time(536_870_912, v6e)
    assert none.latency == pytest.approx(327.4e-6, rel=1e-3)
    assert none.latency == none.mandatory_transfer_time
    with pytest.raises(ValueError):
        stage_cost(attn, llama8b, v6e, prefetched_kv_bytes=536_870_913)
    with pytest.raises(ValueError):
        stage_cost(Gemm(1, 1, 1), llama8b, v6e, prefetched_kv_bytes=1)


def test_systolic_switch_for_decode_attention(llama8b, v6e):
    from dataclasses import replace
    attn = Attention("decode", 1, 4096, 0)
    sys_hw = replace(v6e, decode_attention_unit="systolic")
    slow = stage_cost(attn, llama8b, sys_hw).compute_time
    assert slow > stage_cost(attn, llama8b, v6e).compute_time
    with pytest.raises(ConfigError):
        replace(v6e, decode_attention_unit="tensor")


def test_ffn_down_stage(llama8b, v6e):
    down = Gemm(2048, 14336, 4096, name="ffn_down")
    weights = down.weight_bytes(2)
    assert weights == pytest.approx(117.4e6, rel=1e-3)
    assert transfer_time(weights, v6e) == pytest.approx(71.6e-6, rel=1e-3)
    cost = stage_cost(down, llama8b, v6e)
    assert cost.compute_time > cost.mandatory_transfer_time
    assert cost.latency == pytest.approx(262.0e-6, rel=5e-3)


def test_fusion_rule(llama8b, v6e):
    act = Gemm(2048, 4096, 4096, name="o_proj")
    nxt = Gemm(2048, 4096, 14336, name="ffn_gate")
    prev = OperationDescriptor(act, 0, 0)
    cur = OperationDescriptor(nxt, 0, 1)
    assert act.output_bytes(2) == pytest.approx(16.8e6, rel=1e-2)
    assert fusion_elided_bytes(prev, cur, v6e, llama8b) == 2 * act.output_bytes(2)
    assert fusion_elided_bytes(None, cur, v6e, llama8b) == 0
    big = Gemm(8192, 4096, 4096)
    assert big.output_bytes(2) > v6e.compute_buffer_bytes // 2
    assert fusion_elided_bytes(OperationDescriptor(big, 0, 0), cur, v6e, llama8b) == 0


def test_residual_budget(v6e):
    cost = stage_cost(Gemm(2048, 14336, 4096), _spec(), v6e)
    slack = cost.latency - cost.mandatory_transfer_time
    assert residual_budget_bytes(cost, v6e) == int(slack * v6e.hbm_bandwidth)
    memory_bound = stage_cost(Gemm(1, 4096, 4096), _spec(), v6e)
    assert residual_budget_bytes(memory_bound, v6e) == 0


def _spec():
    from packprefetch.config import load_model
    return load_model("llama3.1-8b")


def test_hardware_presets(v6e, v7):
    assert v6e.compute_buffer_bytes == 80 * MiB
    assert v6e.prefetch_buffer_bytes == 512 * MiB
    assert v6e.hbm_bandwidth == 1.64e12
    assert v7.prefetch_buffer_bytes == 1024 * MiB
    assert v7.hbm_bandwidth == 7.4e12


def test_hardware_validation():
    with pytest.raises(ConfigError):
        HardwareSpec("bad", 1.0, (1, 1, 1), (1, 1, 1), 1, 0, 1.0, 1, bw_scale=0)
    with pytest.raises(ConfigError):
        HardwareSpec("bad", 1.0, (1, 0, 1), (1, 1, 1), 1, 0, 1.0, 1)
    with pytest.raises(ConfigError):
        HardwareSpec.from_dict({"hardware": {"name": "x"}})
