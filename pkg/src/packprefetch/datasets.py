"""Synthetic request workloads (two-quantile lognormal fits) and trace ingestion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Optional, Union

import numpy as np

from ._toml import load_toml
from .scheduler import Request
from .workload import ConfigError

Z90 = NormalDist().inv_cdf(0.9)
PRESET_DIR = Path(__file__).parent / "configs" / "datasets"


def fit_lognormal(median: float, p90: float) -> tuple[float, float]:
    """(mu, sigma) of the lognormal whose median and 90th percentile match."""
    if median <= 0:
        raise ValueError("median must be > 0")
    if p90 < median:
        raise ValueError(f"p90 ({p90}) must be >= median ({median})")
    return math.log(median), math.log(p90 / median) / Z90


@dataclass(frozen=True)
class LengthDistribution:
    kind: str  # "lognormal" | "fixed"
    mu: float = 0.0
    sigma: float = 0.0
    value: int = 1
    clamp_max: int = 131072

    def __post_init__(self) -> None:
        if self.kind not in ("lognormal", "fixed"):
            raise ConfigError(f"unknown length distribution {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.clamp_max < 1:
            raise ConfigError("clamp_max must be >= 1")

    @classmethod
    def from_quantiles(cls, median: float, p90: float, clamp_max: int = 131072) -> "LengthDistribution":
        mu, sigma = fit_lognormal(median, p90)
        return cls("lognormal", mu, sigma, clamp_max=clamp_max)

    @property
    def median(self) -> float:
        return math.exp(self.mu) if self.kind == "lognormal" else float(self.value)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        if self.kind == "fixed":
            raw = np.full(size if size is not None else (), float(self.value))
        else:
            raw = rng.lognormal(self.mu, self.sigma, size)
        out = np.clip(np.rint(raw), 1, self.clamp_max).astype(np.int64)
        return int(out) if size is None else out


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    prompt: LengthDistribution
    output: LengthDistribution
    reported: dict

    @classmethod
    def from_dict(cls, data: dict, clamp_max: int = 131072) -> "DatasetPreset":
        body = data.get("dataset", data)
        try:
            p, o = body["prompt"], body["output"]
            return cls(
                name=body["name"],
                prompt=LengthDistribution.from_quantiles(p["median"], p["p90"], clamp_max),
                output=LengthDistribution.from_quantiles(o["median"], o["p90"], clamp_max),
                reported={"prompt": dict(p), "output": dict(o)},
            )
        except KeyError as exc:
            raise ConfigError(f"dataset config missing key {exc.args[0]!r}") from None

    @classmethod
    def from_file(cls, path: Union[str, Path], clamp_max: int = 131072) -> "DatasetPreset":
        return cls.from_dict(load_toml(path), clamp_max)

    @classmethod
    def named(cls, name: str, clamp_max: int = 131072) -> "DatasetPreset":
        path = PRESET_DIR / f"{name}.toml"
        if not path.exists():
            raise ConfigError(f"no dataset preset named {name!r}")
        return cls.from_file(path, clamp_max)


def sample_request(dists: DatasetPreset, rng: np.random.Generator) -> tuple[int, int]:
    return dists.prompt.sample(rng), dists.output.sample(rng)


def sample_lengths(dists: DatasetPreset, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent prompt/output draws; prompts are drawn first, as a block."""
    return dists.prompt.sample(rng, count), dists.output.sample(rng, count)


def poisson_arrivals(rate: float, count: int, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        raise ValueError(f"arrival rate must be > 0, got {rate}")
    if count == 0:
        return np.zeros(0)
    return np.cumsum(rng.standard_exponential(count) / rate)


@dataclass(frozen=True)
class TraceRecord:
    prompt_tokens: int
    output_tokens: int
    arrival_s: Optional[float] = None


class TraceError(ValueError):
    pass


def load_trace(path: Union[str, Path]) -> list[TraceRecord]:
    """Read newline-delimited JSON request records."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                prompt, output = obj["prompt_tokens"], obj["output_tokens"]
                arrival = obj.get("arrival_s")
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise TraceError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(prompt, int) or not isinstance(output, int) or isinstance(prompt, bool):
                raise TraceError(f"{path}:{lineno}: prompt_tokens/output_tokens must be integers")
            if prompt < 1 or output < 1:
                raise TraceError(f"{path}:{lineno}: lengths must be positive, got ({prompt}, {output})")
            if arrival is not None and (not isinstance(arrival, (int, float)) or arrival < 0):
                raise TraceError(f"{path}:{lineno}: arrival_s must be a non-negative number")
            records.append(TraceRecord(prompt, output, None if arrival is None else float(arrival)))
    if any(r.arrival_s is not None for r in records) and any(r.arrival_s is None for r in records):
        raise TraceError(f"{path}: arrival_s must be given for every record or none")
    return records


@dataclass(frozen=True)
class Workload:
    """Request lengths plus unit-rate arrival gaps; arrivals scale as 1/rate.

    Reusing one workload across arrival rates keeps capacity-search probes paired.
    """

    prompt_lens: tuple[int, ...]
    output_lens: tuple[int, ...]
    unit_gaps: tuple[float, ...] = ()
    fixed_arrivals: Optional[tuple[float, ...]] = None

    def __len__(self) -> int:
        return len(self.prompt_lens)

    @classmethod
    def synthetic(cls, dists: DatasetPreset, count: int, seed: int) -> "Workload":
        rng = np.random.default_rng(seed)
        prompts, outputs = sample_lengths(dists, count, rng)
        gaps = rng.standard_exponential(count)
        return cls(tuple(int(x) for x in prompts), tuple(int(x) for x in outputs),
                   tuple(float(g) for g in gaps))

    @classmethod
    def from_trace(cls, records: list[TraceRecord], seed: int = 0) -> "Workload":
        prompts = tuple(r.prompt_tokens for r in records)
        outputs = tuple(r.output_tokens for r in records)
        if records and records[0].arrival_s is not None:
            return cls(prompts, outputs, fixed_arrivals=tuple(r.arrival_s for r in records))
        gaps = np.random.default_rng(seed).standard_exponential(len(records))
        return cls(prompts, outputs, tuple(float(g) for g in gaps))

    def arrivals(self, rate: Optional[float]) -> np.ndarray:
        if self.fixed_arrivals is not None:
            return np.asarray(self.fixed_arrivals, dtype=float)
        if rate is None or rate <= 0:
            raise ValueError("a positive arrival rate is required for Poisson arrivals")
        return np.cumsum(np.asarray(self.unit_gaps) / rate)

    def requests(self, rate: Optional[float]) -> list[Request]:
        times = self.arrivals(rate)
        return [Request(i, float(t), p, o)
                for i, (t, p, o) in enumerate(zip(times, self.prompt_lens, self.output_lens))]
