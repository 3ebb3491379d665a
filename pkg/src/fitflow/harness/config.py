"""Run configuration: nested dataclasses, JSON round trip, dotted overrides, scoped hashes."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from ..bootstrap import AugmentConfig
from ..errors import ConfigError
from ..flowmatch import FlowTrainConfig, SamplerConfig
from ..landscape import DIFFICULTY_WINDOWS, LandscapeSpec, RankerConfig
from ..latentcodec import CodecConfig, StageConfig

OUT_ENV = "FITFLOW_OUT"
DEFAULT_OUT = "runs/default"


@dataclass(frozen=True)
class BenchmarkConfig:
    difficulty: str = "medium"
    size: int = 2000
    # Desk landscapes are too short for the canonical gaps of 6 / 7 to leave
    # 2,000 eligible sequences; one fewer mutation does.
    min_gap: int | None = 5
    seed: int = 0

    def validate(self) -> None:
        if self.difficulty not in DIFFICULTY_WINDOWS:
            raise ConfigError(f"unknown difficulty {self.difficulty!r}")
        if self.size < 1:
            raise ConfigError("benchmark size must be positive")


@dataclass(frozen=True)
class CalibrationConfig:
    n_candidates: int = 8
    span: float = 4.0
    n: int = 512
    top_k: int = 128
    seed: int = 1000

    def validate(self) -> None:
        if self.n_candidates < 1 or self.n < 1:
            raise ConfigError("calibration needs at least one candidate and one sample")
        if not 0 <= self.top_k <= self.n:
            raise ConfigError("calibration top_k must lie in [0, n]")


@dataclass(frozen=True)
class RunConfig:
    landscape: LandscapeSpec = field(default_factory=LandscapeSpec)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    flow: FlowTrainConfig = field(default_factory=lambda: FlowTrainConfig(steps=2000))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    bootstrap: AugmentConfig | None = field(default_factory=AugmentConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str | None = None

    def validate(self) -> None:
        self.landscape.validate()
        self.benchmark.validate()
        self.codec.validate()
        self.flow.validate()
        self.sampler.validate()
        if self.sampler.top_k > self.sampler.n:
            raise ConfigError(f"sampler.top_k={self.sampler.top_k} exceeds sampler.n={self.sampler.n}")
        self.calibration.validate()
        if self.bootstrap is not None:
            self.bootstrap.validate()
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct: {list(self.seeds)}")
        if self.codec.vocab != self.landscape.vocab or self.codec.length != self.landscape.length:
            raise ConfigError("codec vocab/length must match the landscape")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        try:
            for key, value in d.items():
                if key == "codec":
                    kw[key] = CodecConfig.from_dict(_checked(CodecConfig, value))
                elif key == "bootstrap":
                    if value is None:
                        kw[key] = None
                    else:
                        v = dict(_checked(AugmentConfig, value))
                        if v.get("interval") is not None:
                            v["interval"] = tuple(v["interval"])
                        kw[key] = AugmentConfig(**v)
                elif key == "seeds":
                    kw[key] = tuple(int(s) for s in value)
                elif key == "out":
                    kw[key] = value
                else:
                    typ = _SECTION_TYPES[key]
                    kw[key] = typ(**_checked(typ, value))
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        return cls(**kw)

    def resolve_out(self, override: str | None = None) -> Path:
        return Path(override or self.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


_SECTION_TYPES = {
    "landscape": LandscapeSpec,
    "benchmark": BenchmarkConfig,
    "ranker": RankerConfig,
    "flow": FlowTrainConfig,
    "sampler": SamplerConfig,
    "calibration": CalibrationConfig,
}


def _checked(typ, value) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"section for {typ.__name__} must be an object")
    names = {f.name for f in fields(typ)}
    extra = set(value) - names
    if extra:
        raise ConfigError(f"unknown keys for {typ.__name__}: {sorted(extra)}")
    return value


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def ci_profile() -> RunConfig:
    """Small, fast configuration for smoke tests (k=16, n=64)."""
    return RunConfig(
        benchmark=BenchmarkConfig(size=300),
        ranker=RankerConfig(epochs=30, patience=5),
        codec=CodecConfig(
            stage1=StageConfig(lr=2e-3, warmup=20, max_epochs=3, eval_every=20),
            stage2=StageConfig(lr=2e-3, warmup=20, max_epochs=6, eval_every=20, patience=3),
        ),
        flow=FlowTrainConfig(steps=60, batch=64, warmup=10, eval_every=30, hidden=32, n_blocks=1),
        sampler=SamplerConfig(K=8, n=64, top_k=16),
        calibration=CalibrationConfig(n_candidates=3, n=64, top_k=16),
        bootstrap=AugmentConfig(n_targets=4, K=8),
        seeds=(0, 1),
    )


PROFILES = {"desk": RunConfig, "ci": ci_profile}


def load_config(path: str | Path | None, profile: str = "desk") -> dict:
    """Resolved config dictionary: profile defaults overlaid with the file's sections."""
    base = PROFILES[profile]().to_dict()
    if path is None:
        return base
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return _merge(base, data)


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values parse as JSON, else stay strings."""
    out = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for i, part in enumerate(parts[:-1]):
            if part not in node:
                raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
            if node[part] is None and part == "bootstrap":
                node[part] = _jsonable(asdict(AugmentConfig()))
            node = node[part]
            if not isinstance(node, dict):
                raise ConfigError(f"config key {'.'.join(parts[: i + 1])!r} is not a section")
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return out


def build_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
    out: str | None = None,
    profile: str = "desk",
) -> RunConfig:
    d = apply_overrides(load_config(path, profile), overrides)
    if seed is not None:
        d["seeds"] = [seed]
    if out is not None:
        d["out"] = out
    cfg = RunConfig.from_dict(d)
    cfg.validate()
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


# Config sections each stage's artifacts depend on.
STAGE_SECTIONS = {
    "landscape": ("landscape",),
    "benchmark": ("landscape", "benchmark"),
    "codec": ("landscape", "benchmark", "codec"),
    "ranker": ("landscape", "benchmark", "ranker"),
    "flow": ("landscape", "benchmark", "codec", "flow"),
    "sample": ("landscape", "benchmark", "codec", "flow", "ranker", "sampler", "calibration", "seeds"),
    "bootstrap": (
        "landscape", "benchmark", "codec", "flow", "ranker", "sampler", "calibration", "seeds", "bootstrap",
    ),
}


def stage_hash(cfg: RunConfig, stage: str) -> str:
    d = cfg.to_dict()
    return digest({k: d[k] for k in STAGE_SECTIONS[stage]})


def config_hash(cfg: RunConfig) -> str:
    """Hash of the full resolved config except the output location."""
    d = cfg.to_dict()
    d.pop("out", None)
    return digest(d)


def with_seeds(cfg: RunConfig, seeds: Sequence[int]) -> RunConfig:
    return replace(cfg, seeds=tuple(seeds))


__all__ = [
    "BenchmarkConfig",
    "CalibrationConfig",
    "RunConfig",
    "apply_overrides",
    "build_config",
    "canonical_json",
    "ci_profile",
    "config_hash",
    "digest",
    "load_config",
    "stage_hash",
    "with_seeds",
]
