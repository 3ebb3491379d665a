"""Guided synthetic-data augmentation and flow-model retraining."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, SamplingError
from .flowmatch import FlowHistory, FlowTrainConfig, VelocityModel, euler_integrate, train_flow
from .landscape import BenchmarkSubset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    """``interval=None`` lets the caller derive the target interval from the training data."""

    interval: tuple[float, float] | None = None
    n_targets: int = 20
    w: float = 0.0
    K: int = 40
    q: float = 0.01
    expansion: float = 0.25
    p: float = 0.1
    max_retries: int = 3
    warm_start: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.interval is not None and not self.interval[0] < self.interval[1]:
            raise ConfigError(f"interval {self.interval} must satisfy f_lo < f_hi")
        if self.n_targets < 1:
            raise ConfigError("n_targets must be >= 1")
        if not self.expansion > 0:
            raise ConfigError("expansion factor must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"dropout p={self.p} outside [0, 1]")
        if self.q < 0:
            raise ConfigError("label noise scale q must be non-negative")
        if self.K < 1:
            raise ConfigError("K must be >= 1")


@dataclass(frozen=True)
class SyntheticRecord:
    sequence: str
    label: float
    target: float
    eta: float
    seed: tuple[int, int]

    def check(self, q: float) -> bool:
        return self.label == self.target + q * self.eta


@dataclass
class AugmentedDataset:
    base: BenchmarkSubset
    synthetic: list[SyntheticRecord]

    @property
    def sequences(self) -> list[str]:
        return self.base.sequences + [r.sequence for r in self.synthetic]

    @property
    def fitness(self) -> np.ndarray:
        return np.concatenate([self.base.fitness, np.array([r.label for r in self.synthetic], dtype=np.float64)])

    def __len__(self) -> int:
        return len(self.base) + len(self.synthetic)


def fitness_grid(interval: tuple[float, float], n: int) -> list[float]:
    """``n`` evenly spaced targets including both endpoints; ``n=1`` gives the midpoint."""
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ContractError(f"degenerate interval [{lo}, {hi}]")
    if n < 1:
        raise ContractError("grid size must be >= 1")
    if n == 1:
        return [(lo + hi) / 2]
    return [float(v) for v in np.linspace(lo, hi, n)]


def synthetic_budget(n_base: int, expansion: float) -> int:
    # Decimal reading of the factor so 0.1 * 2000 is 200, not 201.
    return math.ceil(Fraction(repr(float(expansion))) * n_base)


def allocate_budget(total: int, n_targets: int) -> list[int]:
    """Even split with the remainder going to the lowest targets."""
    base, extra = divmod(total, n_targets)
    return [base + (1 if j < extra else 0) for j in range(n_targets)]


def augment(
    model: VelocityModel, codec, base: BenchmarkSubset, cfg: AugmentConfig, interval: tuple[float, float] | None = None
) -> AugmentedDataset:
    """Sample synthetic sequences at each grid target and label them ``f + q * eta``."""
    cfg.validate()
    interval = interval or cfg.interval
    if interval is None:
        raise ConfigError("augmentation interval is unset")
    if tuple(model.latent_shape) != tuple(codec.latent_shape):
        raise ConfigError("flow and codec latent shapes differ")
    targets = fitness_grid(interval, cfg.n_targets)
    counts = allocate_budget(synthetic_budget(len(base), cfg.expansion), len(targets))
    shape = tuple(model.latent_shape)
    synthetic: list[SyntheticRecord] = []
    for j, (target, count) in enumerate(zip(targets, counts)):
        if count == 0:
            continue
        rng = np.random.default_rng([cfg.seed, 30, j])
        for attempt in range(cfg.max_retries + 1):
            z0 = rng.standard_normal((count,) + shape)
            try:
                z1 = euler_integrate(model, z0, np.full(count, target), cfg.w, cfg.K)
                break
            except SamplingError as exc:
                log.warning("target %.4g attempt %d failed: %s", target, attempt, exc)
        else:
            raise SamplingError(f"target {target} failed after {cfg.max_retries} retries")
        seqs = codec.sequences_from_latents(z1)
        eta = rng.standard_normal(count)
        for s, e in zip(seqs, eta):
            synthetic.append(SyntheticRecord(s, target + cfg.q * float(e), target, float(e), (cfg.seed, j)))
    return AugmentedDataset(base, synthetic)


@dataclass
class BootstrapResult:
    pre_model: VelocityModel
    post_model: VelocityModel
    augmented: AugmentedDataset
    interval: tuple[float, float]
    pre_history: FlowHistory | None = None
    post_history: FlowHistory | None = None
    summary: dict = field(default_factory=dict)


def bootstrap_round(
    base: BenchmarkSubset,
    codec,
    flow_config: FlowTrainConfig,
    cfg: AugmentConfig,
    interval: tuple[float, float] | None = None,
    pre_model: VelocityModel | None = None,
) -> BootstrapResult:
    """Train (or reuse) the round-0 flow model, augment, and retrain on the augmented set.

    Oracle-free: the caller evaluates ``pre_model`` and ``post_model``.
    """
    cfg.validate()
    z_base = codec.latents(base.sequences)
    pre_history = None
    if pre_model is None:
        pre_model, pre_history = train_flow(z_base, base.fitness, flow_config)
    data = augment(pre_model, codec, base, cfg, interval)
    z_syn = codec.latents([r.sequence for r in data.synthetic]) if data.synthetic else z_base[:0]
    post_cfg = replace(flow_config, p=cfg.p)
    init = pre_model.store.state_dict() if cfg.warm_start else None
    post_model, post_history = train_flow(np.concatenate([z_base, z_syn]), data.fitness, post_cfg, init_state=init)
    labels = np.array([r.label for r in data.synthetic])
    summary = {
        "n_base": len(base),
        "n_synthetic": len(data.synthetic),
        "n_augmented": len(data),
        "per_target": allocate_budget(len(data.synthetic), cfg.n_targets),
        "interval": [float(v) for v in (interval or cfg.interval)],
        "label_min": float(labels.min()) if len(labels) else None,
        "label_max": float(labels.max()) if len(labels) else None,
        "unique_synthetic": len({r.sequence for r in data.synthetic}),
    }
    return BootstrapResult(
        pre_model, post_model, data, tuple(summary["interval"]), pre_history, post_history, summary
    )


def synthetic_csv(records: Sequence[SyntheticRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence", "label", "target", "eta", "seed", "target_index"])
    for r in records:
        w.writerow([r.sequence, repr(r.label), repr(r.target), repr(r.eta), r.seed[0], r.seed[1]])
    return buf.getvalue()
