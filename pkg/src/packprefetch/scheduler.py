"""Chunked-prefill packing: batch formation and per-request state machines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

QUEUED = "queued"
PREFILLING = "prefilling"
DECODING = "decoding"
DONE = "done"


@dataclass
class Request:
    id: int
    arrival_time: float
    prompt_len: int
    output_len: int
    state: str = QUEUED
    prefill_progress: int = 0
    kv_len: int = 0
    tokens_generated: int = 0
    first_token_time: Optional[float] = None
    first_scheduled_time: Optional[float] = None
    last_token_time: Optional[float] = None
    tbt_samples: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.prompt_len < 1 or self.output_len < 1:
            raise ValueError(f"request {self.id}: prompt_len and output_len must be >= 1")

    @property
    def remaining_prompt(self) -> int:
        return self.prompt_len - self.prefill_progress

    @property
    def ttft(self) -> Optional[float]:
        if self.first_token_time is None:
            return None
        return self.first_token_time - self.arrival_time

    @property
    def scheduling_delay(self) -> Optional[float]:
        if self.first_scheduled_time is None:
            return None
        return self.first_scheduled_time - self.arrival_time


@dataclass(frozen=True)
class PackedBatch:
    """One iteration's work: decode tokens plus prefill slices under a token budget.

    ``chunk_size=None`` leaves the batch unconstrained (stage-level experiments).
    """

    decode_members: tuple[tuple[int, int], ...] = ()
    prefill_slices: tuple[tuple[int, int, int], ...] = ()
    chunk_size: Optional[int] = None
    budget_counts_decode: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "decode_members", tuple(tuple(m) for m in self.decode_members))
        object.__setattr__(self, "prefill_slices", tuple(tuple(s) for s in self.prefill_slices))
        ids = [rid for rid, _ in self.decode_members] + [rid for rid, _, _ in self.prefill_slices]
        if len(ids) != len(set(ids)):
            raise ValueError("a request may appear at most once per batch")
        for rid, kv_len in self.decode_members:
            if kv_len < 1:
                raise ValueError(f"decode member {rid} has kv_len {kv_len} < 1")
        for rid, start, count in self.prefill_slices:
            if start < 0 or count < 1:
                raise ValueError(f"prefill slice {rid} has start={start}, count={count}")
        if self.chunk_size is not None and self.budget_used > self.chunk_size:
            raise ValueError(f"batch uses {self.budget_used} tokens, over chunk_size {self.chunk_size}")

    @property
    def prefill_tokens(self) -> int:
        return sum(count for _, _, count in self.prefill_slices)

    @property
    def num_decode(self) -> int:
        return len(self.decode_members)

    @property
    def num_tokens(self) -> int:
        return self.prefill_tokens + self.num_decode

    @property
    def budget_used(self) -> int:
        return self.num_tokens if self.budget_counts_decode else self.prefill_tokens

    @property
    def is_empty(self) -> bool:
        return not self.decode_members and not self.prefill_slices

    @property
    def request_ids(self) -> list[int]:
        return [rid for rid, _, _ in self.prefill_slices] + [rid for rid, _ in self.decode_members]


def decode_batch(kv_tokens: int, num_requests: int, first_id: int = 0) -> tuple[tuple[int, int], ...]:
    """Split ``kv_tokens`` as evenly as possible over at most ``num_requests`` decode members."""
    n = max(1, min(num_requests, kv_tokens))
    base, extra = divmod(kv_tokens, n)
    return tuple((first_id + i, base + (1 if i < extra else 0)) for i in range(n))


def form_batch(
    running: Iterable[Request],
    queue: Sequence[Request],
    chunk_size: int,
    max_decode: int = 32,
    budget_counts_decode: bool = True,
    packing: bool = True,
) -> PackedBatch:
    """Sarathi-style batch: decode requests first (FCFS), then prefill slices FCFS.

    At most ``max_decode`` decode members are admitted, and never more than the
    chunk budget when decode tokens count against it.

    ``queue`` holds requests with unfinished prefill in arrival order; the head is
    split when it does not fit. With ``packing=False`` an iteration is either the
    head request's whole remaining prompt or a decode-only batch.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    decoding = sorted((r for r in running if r.state == DECODING), key=lambda r: (r.arrival_time, r.id))

    if not packing:
        if queue:
            head = queue[0]
            return PackedBatch(prefill_slices=((head.id, head.prefill_progress, head.remaining_prompt),))
        return PackedBatch(decode_members=tuple((r.id, r.kv_len) for r in decoding[:max_decode]))

    cap = min(max_decode, chunk_size) if budget_counts_decode else max_decode
    members = tuple((r.id, r.kv_len) for r in decoding[:cap])
    budget = chunk_size - len(members) if budget_counts_decode else chunk_size
    slices = []
    for req in queue:
        if budget <= 0:
            break
        take = min(req.remaining_prompt, budget)
        if take > 0:
            slices.append((req.id, req.prefill_progress, take))
            budget -= take
    return PackedBatch(members, tuple(slices), chunk_size, budget_counts_decode)


def advance(batch: PackedBatch, requests: Mapping[int, Request], iteration_end_time: float) -> list[Request]:
    """Apply one simulated iteration to the requests it touched.

    The iteration that completes a prompt also emits its first output token, so a
    request contributes ``output_len - 1`` decode iterations and TBT samples.
    Returns the requests that finished in this iteration.
    """
    finished = []
    for rid, start, count in batch.prefill_slices:
        req = requests[rid]
        if req.state == DONE:
            raise ValueError(f"request {rid} is already done")
        if req.state == DECODING or start != req.prefill_progress or count > req.remaining_prompt:
            raise ValueError(f"prefill slice ({start}, {count}) inconsistent with request {rid}")
        req.prefill_progress += count
        req.state = PREFILLING
        if req.prefill_progress == req.prompt_len:
            req.state = DECODING
            req.kv_len = req.prompt_len
            req.first_token_time = iteration_end_time
            req.last_token_time = iteration_end_time
            req.tokens_generated = 1
            if req.tokens_generated == req.output_len:
                req.state = DONE
                finished.append(req)

    for rid, kv_len in batch.decode_members:
        req = requests[rid]
        if req.state != DECODING:
            raise ValueError(f"request {rid} is {req.state}, not decoding")
        if kv_len != req.kv_len:
            raise ValueError(f"decode member {rid} kv_len {kv_len} != request kv_len {req.kv_len}")
        req.tbt_samples.append(iteration_end_time - req.last_token_time)
        req.last_token_time = iteration_end_time
        req.tokens_generated += 1
        req.kv_len += 1
        if req.tokens_generated == req.output_len:
            req.state = DONE
            finished.append(req)
    return finished
