"""Transformer cost accounting: model specs, FLOP/byte counts, per-iteration op lists."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Literal, Optional, Union

from ._toml import load_toml

if TYPE_CHECKING:
    from .hardware import HardwareSpec
    from .scheduler import PackedBatch


class ConfigError(ValueError):
    """Raised for invalid model, hardware, dataset or experiment configuration."""


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    d_model: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    bytes_per_value: int = 2
    max_context: int = 131072

    def __post_init__(self) -> None:
        for field in ("num_layers", "d_model", "num_heads", "num_kv_heads", "head_dim",
                      "d_ff", "vocab_size", "max_context"):
            value = getattr(self, field)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{self.name}: {field} must be a positive integer, got {value!r}")
        if self.bytes_per_value not in (1, 2, 4):
            raise ConfigError(f"{self.name}: bytes_per_value must be 1, 2 or 4, got {self.bytes_per_value!r}")
        if self.num_kv_heads > self.num_heads or self.num_heads % self.num_kv_heads:
            raise ConfigError(f"{self.name}: num_heads ({self.num_heads}) must be a multiple of "
                              f"num_kv_heads ({self.num_kv_heads})")

    @property
    def q_width(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.num_kv_heads * self.head_dim

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        body = data.get("model", data)
        known = {k: body[k] for k in cls.__dataclass_fields__ if k in body}
        missing = {"name", "num_layers", "d_model", "num_heads", "num_kv_heads", "head_dim",
                   "d_ff", "vocab_size"} - known.keys()
        if missing:
            raise ConfigError(f"model config missing keys: {sorted(missing)}")
        return cls(**known)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ModelSpec":
        return cls.from_dict(load_toml(path))


def gemm_flops(m: int, k: int, n: int) -> int:
    """Multiply-accumulate count of an (m x k) @ (k x n) product, as flops."""
    if min(m, k, n) < 1:
        raise ValueError(f"GEMM dims must be >= 1, got ({m}, {k}, {n})")
    return 2 * m * k * n


def layer_weight_bytes(spec: ModelSpec) -> int:
    d, b = spec.d_model, spec.bytes_per_value
    qkv = d * (d + 2 * spec.kv_width)
    out = spec.q_width * d
    ffn = 3 * d * spec.d_ff
    return (qkv + out + ffn) * b


def embedding_bytes(spec: ModelSpec) -> int:
    """Bytes of one vocab x d_model table (token embedding or LM head)."""
    return spec.vocab_size * spec.d_model * spec.bytes_per_value


def model_weight_bytes(spec: ModelSpec) -> int:
    return spec.num_layers * layer_weight_bytes(spec) + 2 * embedding_bytes(spec)


def kv_bytes(kv_len: int, spec: ModelSpec) -> int:
    """K and V bytes of one layer for ``kv_len`` cached tokens."""
    if kv_len < 0:
        raise ValueError(f"kv_len must be >= 0, got {kv_len}")
    return 2 * kv_len * spec.kv_width * spec.bytes_per_value


@dataclass(frozen=True)
class AttentionCost:
    flops: int
    hbm_read_bytes: int
    hbm_write_bytes: int
    kv_read_bytes: int
    kv_write_bytes: int


def attention_cost(phase: str, q_len: int, kv_len: int, spec: ModelSpec) -> AttentionCost:
    """FlashAttention-style cost: no score matrix ever reaches HBM.

    Softmax and normalization flops are not counted. ``kv_write_bytes`` is the
    append of the ``q_len`` new tokens' K/V, tracked separately from the output.
    """
    _check_attention_dims(phase, q_len, kv_len)
    b = spec.bytes_per_value
    kv_read = kv_bytes(kv_len, spec)
    q_bytes = q_len * spec.q_width * b
    return AttentionCost(
        flops=4 * q_len * kv_len * spec.num_heads * spec.head_dim,
        hbm_read_bytes=kv_read + q_bytes,
        hbm_write_bytes=q_bytes,
        kv_read_bytes=kv_read,
        kv_write_bytes=kv_bytes(q_len, spec),
    )


def _check_attention_dims(phase: str, q_len: int, kv_len: int) -> None:
    if phase == "decode":
        if q_len != 1 or kv_len < 1:
            raise ValueError(f"decode attention needs q_len == 1 and kv_len >= 1, got ({q_len}, {kv_len})")
    elif phase == "prefill":
        if not 1 <= q_len <= kv_len:
            raise ValueError(f"prefill attention needs 1 <= q_len <= kv_len, got ({q_len}, {kv_len})")
    else:
        raise ValueError(f"unknown attention phase {phase!r}")


@dataclass(frozen=True)
class Gemm:
    m: int
    k: int
    n: int
    weight_resident: bool = False
    name: str = "gemm"

    def __post_init__(self) -> None:
        if min(self.m, self.k, self.n) < 1:
            raise ValueError(f"GEMM dims must be >= 1, got ({self.m}, {self.k}, {self.n})")

    def input_bytes(self, b: int) -> int:
        return self.m * self.k * b

    def weight_bytes(self, b: int) -> int:
        return 0 if self.weight_resident else self.k * self.n * b

    def output_bytes(self, b: int) -> int:
        return self.m * self.n * b


@dataclass(frozen=True)
class Attention:
    phase: Literal["prefill", "decode"]
    q_len: int
    kv_len: int
    owner: int

    def __post_init__(self) -> None:
        _check_attention_dims(self.phase, self.q_len, self.kv_len)

    @property
    def name(self) -> str:
        return f"attn-{self.phase}"


OpKind = Union[Gemm, Attention]


@dataclass(frozen=True)
class OperationDescriptor:
    kind: OpKind
    layer: int
    sequence_index: int
    fused_with_prev: bool = False

    @property
    def is_decode_attention(self) -> bool:
        return isinstance(self.kind, Attention) and self.kind.phase == "decode"


def op_input_bytes(kind: OpKind, spec: ModelSpec) -> int:
    """Activation bytes an op reads (weights and KV excluded)."""
    if isinstance(kind, Gemm):
        return kind.input_bytes(spec.bytes_per_value)
    return kind.q_len * spec.q_width * spec.bytes_per_value


def op_output_bytes(kind: OpKind, spec: ModelSpec) -> int:
    if isinstance(kind, Gemm):
        return kind.output_bytes(spec.bytes_per_value)
    return kind.q_len * spec.q_width * spec.bytes_per_value


def layer_kinds(spec: ModelSpec, batch: "PackedBatch") -> list[OpKind]:
    """One decoder layer's ops in execution order.

    Prefill-slice attentions run before decode attentions so that their
    compute-bound time can feed the prefetch of the decode KV behind them.
    """
    tokens = batch.num_tokens
    if tokens == 0:
        raise ValueError("cannot build ops for an empty batch")
    d = spec.d_model
    kinds: list[OpKind] = [Gemm(tokens, d, d + 2 * spec.kv_width, name="qkv")]
    for rid, start, count in batch.prefill_slices:
        kinds.append(Attention("prefill", count, start + count, rid))
    for rid, kv_len in batch.decode_members:
        kinds.append(Attention("decode", 1, kv_len, rid))
    kinds.append(Gemm(tokens, spec.q_width, d, name="o_proj"))
    kinds.append(Gemm(tokens, d, spec.d_ff, name="ffn_gate"))
    kinds.append(Gemm(tokens, d, spec.d_ff, name="ffn_up"))
    kinds.append(Gemm(tokens, spec.d_ff, d, name="ffn_down"))
    return kinds


def embedding_kinds(spec: ModelSpec, batch: "PackedBatch") -> tuple[Gemm, Gemm]:
    """Token embedding and LM head, each modeled as a vocab-sized GEMM."""
    tokens = batch.num_tokens
    return (Gemm(tokens, spec.vocab_size, spec.d_model, name="embed"),
            Gemm(tokens, spec.d_model, spec.vocab_size, name="lm_head"))


def build_iteration_ops(
    spec: ModelSpec,
    batch: "PackedBatch",
    hw: Optional["HardwareSpec"] = None,
    include_embeddings: bool = False,
) -> list[OperationDescriptor]:
    """Expand a packed batch into the ordered, layer-by-layer op list.

    Decoder layers only by default; ``include_embeddings`` wraps them with the
    embedding GEMM (layer -1) and LM head (layer ``num_layers``). Fusion flags
    are evaluated only when ``hw`` is given.
    """
    from .hardware import fusion_elided_bytes

    kinds: list[tuple[int, OpKind]] = []
    embed, lm_head = embedding_kinds(spec, batch)
    if include_embeddings:
        kinds.append((-1, embed))
    per_layer = layer_kinds(spec, batch)
    for layer in range(spec.num_layers):
        kinds.extend((layer, kind) for kind in per_layer)
    if include_embeddings:
        kinds.append((spec.num_layers, lm_head))

    ops: list[OperationDescriptor] = []
    prev: Optional[OperationDescriptor] = None
    for index, (layer, kind) in enumerate(kinds):
        op = OperationDescriptor(kind, layer, index)
        if hw is not None and prev is not None and fusion_elided_bytes(prev, op, hw, spec) > 0:
            op = OperationDescriptor(kind, layer, index, fused_with_prev=True)
        ops.append(op)
        prev = op
    return ops
