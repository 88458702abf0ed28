"""Experiment configuration: TOML files, shipped presets, CLI overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

from ._toml import load_toml
from .datasets import DatasetPreset, Workload, load_trace
from .hardware import MiB, HardwareSpec
from .stage import POLICIES
from .workload import ConfigError, ModelSpec

CONFIG_DIR = Path(__file__).parent / "configs"


def _resolve(ref: str, kind: str, base: Optional[Path]) -> Path:
    """A preset name (e.g. ``llama3.1-8b``) or a path, relative to the config file."""
    preset = CONFIG_DIR / kind / f"{ref}.toml"
    if preset.exists():
        return preset
    path = Path(ref)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise ConfigError(f"{kind} config {ref!r} is neither a preset nor an existing file")
    return path


def load_model(ref: str, base: Optional[Path] = None) -> ModelSpec:
    return ModelSpec.from_file(_resolve(ref, "models", base))


def load_hardware(ref: str, base: Optional[Path] = None) -> HardwareSpec:
    return HardwareSpec.from_file(_resolve(ref, "hardware", base))


@dataclass
class StageAxes:
    prefill_tokens: list[int] = field(default_factory=lambda: [512, 1024, 2048])
    kv_tokens: list[int] = field(default_factory=lambda: [16384, 65536, 131072])
    buffer_bytes: list[int] = field(default_factory=lambda: [0, 512 * MiB])
    decode_requests: int = 128
    attribution: str = "proportional"


@dataclass
class ServeSettings:
    datasets: list[str] = field(default_factory=lambda: ["openchat_sharegpt4", "arxiv_summarization"])
    trace: Optional[str] = None
    chunk_sizes: list[int] = field(default_factory=lambda: [512])
    policies: list[str] = field(default_factory=lambda: ["packing", "packing-prefetch"])
    num_requests: int = 2000
    max_decode: int = 32
    budget_counts_decode: bool = True
    warmup_fraction: float = 0.05
    slo_tbt_ms: Optional[float] = None
    slo_delay_s: float = 1.0
    tbt_slo_sweep_ms: list[float] = field(default_factory=list)
    resolution_qps: float = 0.05
    bw_savings: bool = False
    target_qps: Optional[float] = None


@dataclass
class ExperimentConfig:
    model: str = "llama3.1-8b"
    hardware: str = "tpuv6e-like"
    policy: str = "packing-prefetch"
    seed: int = 0
    output_dir: str = "out"
    stage: StageAxes = field(default_factory=StageAxes)
    serve: ServeSettings = field(default_factory=ServeSettings)
    base_dir: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {sorted(POLICIES)}")
        for name in ("prefill_tokens", "kv_tokens", "buffer_bytes"):
            axis = getattr(self.stage, name)
            if not axis:
                raise ConfigError(f"stage axis {name!r} is empty")
            if any(v < 0 for v in axis):
                raise ConfigError(f"stage axis {name!r} has negative entries")
        if self.stage.decode_requests < 1:
            raise ConfigError("decode_requests must be >= 1")
        if self.stage.attribution not in ("proportional", "attention-only"):
            raise ConfigError(f"unknown attribution {self.stage.attribution!r}")
        s = self.serve
        if bool(s.trace) == bool(s.datasets):
            raise ConfigError("serve needs exactly one workload source: datasets or trace")
        if not s.chunk_sizes or any(c < 1 for c in s.chunk_sizes):
            raise ConfigError("chunk_sizes must be nonempty and positive")
        for p in s.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown serve policy {p!r}")
        if not s.policies:
            raise ConfigError("serve policies must be nonempty")
        if s.num_requests < 1:
            raise ConfigError("num_requests must be >= 1")
        if s.slo_delay_s <= 0 or (s.slo_tbt_ms is not None and s.slo_tbt_ms <= 0):
            raise ConfigError("SLO values must be > 0")
        self.model_spec()
        self.hardware_spec()
        for name in s.datasets:
            DatasetPreset.named(name)
        return self

    @property
    def _base(self) -> Optional[Path]:
        return Path(self.base_dir) if self.base_dir else None

    def model_spec(self) -> ModelSpec:
        return load_model(self.model, self._base)

    def hardware_spec(self) -> HardwareSpec:
        return load_hardware(self.hardware, self._base)

    def workloads(self) -> dict[str, Workload]:
        spec = self.model_spec()
        if self.serve.trace:
            path = Path(self.serve.trace)
            if not path.is_absolute() and self._base is not None:
                path = self._base / path
            return {path.stem: Workload.from_trace(load_trace(path), self.seed)}
        return {name: Workload.synthetic(DatasetPreset.named(name, spec.max_context),
                                         self.serve.num_requests, self.seed)
                for name in self.serve.datasets}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _section(cls, data: dict, name: str):
    known = cls.__dataclass_fields__
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**data)


def from_dict(data: dict, base_dir: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    data = dict(data)
    top = dict(data.pop("experiment", {}))
    stage_data = dict(data.pop("stage", {}))
    if "buffer_mib" in stage_data:
        if "buffer_bytes" in stage_data:
            raise ConfigError("give buffer_mib or buffer_bytes, not both")
        stage_data["buffer_bytes"] = [int(v * MiB) for v in stage_data.pop("buffer_mib")]
    stage = _section(StageAxes, stage_data, "stage")
    serve_data = dict(data.pop("serve", {}))
    if serve_data.get("trace") and "datasets" not in serve_data:
        serve_data["datasets"] = []
    serve = _section(ServeSettings, serve_data, "serve")
    if data:
        raise ConfigError(f"unknown sections: {sorted(data)}")
    cfg = _section(ExperimentConfig, top, "experiment")
    return replace(cfg, stage=stage, serve=serve, base_dir=str(base_dir) if base_dir else None)


def load_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = load_toml(path)
    except Exception as exc:  # tomli raises its own decode error type
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data, path.parent)
