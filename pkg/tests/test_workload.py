import pytest

from packprefetch.scheduler import PackedBatch
from packprefetch.workload import (
    Attention,
    ConfigError,
    Gemm,
    ModelSpec,
    attention_cost,
    build_iteration_ops,
    gemm_flops,
    kv_bytes,
    layer_weight_bytes,
    model_weight_bytes,
)

from conftest import toy_hw

TOY = ModelSpec("toy", 1, 2, 1, 1, 2, 4, 2, bytes_per_value=1)


def test_gemm_flops():
    assert gemm_flops(1, 1, 1) == 2
    assert gemm_flops(512, 4096, 6144) == 25_769_803_776
    assert gemm_flops(2048, 14336, 4096) == 240_518_168_576
    with pytest.raises(ValueError):
        gemm_flops(0, 1, 1)


def test_layer_and_model_weights(llama8b):
    assert layer_weight_bytes(TOY) == 40
    assert layer_weight_bytes(llama8b) == 436_207_616
    assert model_weight_bytes(llama8b) == 16_059_990_016
    assert model_weight_bytes(llama8b) == pytest.approx(16.06e9, rel=0.01)
    assert model_weight_bytes(TOY) == 40 * 1 + 2 * (2 * 2 * 1)


@pytest.mark.parametrize("field,value", [("num_layers", 0), ("bytes_per_value", 0), ("bytes_per_value", 3),
                                         ("num_kv_heads", 3), ("d_model", -1)])
def test_model_spec_validation(field, value):
    kwargs = dict(name="x", num_layers=2, d_model=8, num_heads=4, num_kv_heads=2, head_dim=2, d_ff=8, vocab_size=4)
    kwargs[field] = value
    with pytest.raises(ConfigError):
        ModelSpec(**kwargs)


def test_kv_bytes(llama8b):
    assert kv_bytes(0, llama8b) == 0
    assert kv_bytes(131072, llama8b) == 536_870_912
    assert kv_bytes(4096, llama8b) == 16_777_216
    with pytest.raises(ValueError):
        kv_bytes(-1, llama8b)


def test_attention_cost(llama8b):
    unit = ModelSpec("unit", 1, 1, 1, 1, 1, 1, 1, bytes_per_value=2)
    c = attention_cost("decode", 1, 1, unit)
    assert (c.flops, c.kv_read_bytes) == (4, 4)
    d = attention_cost("decode", 1, 131072, llama8b)
    assert d.flops == 2_147_483_648
    assert d.kv_read_bytes == 536_870_912
    assert d.hbm_read_bytes == 536_870_912 + 4096 * 2
    assert d.hbm_write_bytes == 4096 * 2
    assert attention_cost("prefill", 512, 512, llama8b).flops == 4_294_967_296
    for n in (1, 7, 64):
        assert attention_cost("prefill", n, n, llama8b).flops == n * attention_cost("decode", 1, n, llama8b).flops
    with pytest.raises(ValueError):
        attention_cost("decode", 2, 8, llama8b)
    with pytest.raises(ValueError):
        attention_cost("prefill", 9, 8, llama8b)


def test_iteration_ops_count_and_order():
    spec = ModelSpec("two", 2, 8, 2, 1, 4, 16, 32)
    batch = PackedBatch(decode_members=((0, 5), (1, 9)), prefill_slices=((2, 4, 3),))
    ops = build_iteration_ops(spec, batch)
    assert len(ops) == 16
    assert [op.sequence_index for op in ops] == list(range(16))
    first = [op.kind for op in ops[:8]]
    assert first[0] == Gemm(5, 8, 8 + 2 * 4, name=first[0].name)
    assert first[1] == Attention("prefill", 3, 7, 2)
    assert [k.kv_len for k in first[2:4]] == [5, 9]
    assert [k.name for k in first[4:]] == ["o_proj", "ffn_gate", "ffn_up", "ffn_down"]
    assert sum(op.kind.m for op in ops if op.kind.name == "qkv" and op.layer == 0) == batch.num_tokens


def test_iteration_ops_shapes(llama8b):
    ops = build_iteration_ops(llama8b, PackedBatch(prefill_slices=((0, 0, 512),)))
    assert (ops[0].kind.m, ops[0].kind.k, ops[0].kind.n) == (512, 4096, 6144)
    decode = build_iteration_ops(llama8b, PackedBatch(decode_members=((0, 10),)))
    assert decode[0].kind.m == 1
    with_emb = build_iteration_ops(llama8b, PackedBatch(decode_members=((0, 10),)), include_embeddings=True)
    assert len(with_emb) == len(decode) + 2
    with pytest.raises(ValueError):
        build_iteration_ops(llama8b, PackedBatch())


def test_fused_flags_follow_buffer_rule(llama8b):
    batch = PackedBatch(decode_members=((0, 10),))
    fused = build_iteration_ops(llama8b, batch, hw=toy_hw(compute_buffer=1 << 30))
    assert not fused[0].fused_with_prev and all(op.fused_with_prev for op in fused[1:])
    unfused = build_iteration_ops(llama8b, batch, hw=toy_hw(compute_buffer=1))
    assert not any(op.fused_with_prev for op in unfused)


def test_model_from_dict_errors():
    with pytest.raises(ConfigError):
        ModelSpec.from_dict({"model": {"name": "x", "num_layers": 1}})
