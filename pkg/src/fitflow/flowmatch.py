"""Fitness-conditioned flow matching in the codec's latent space.

Training regresses ``v(z_t, t, f)`` onto ``z1 - z0`` along the straight path
``z_t = (1 - t) z0 + t z1`` while dropping the fitness condition with
probability ``p``. Sampling integrates the classifier-free-guided field
``(1 + w) v_cond - w v_uncond`` with a fixed-step Euler scheme.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, ContractError, SamplingError, TrainingError
from .landscape import split_indices
from .numcore import ParamStore, Tensor, adam_update, ops, value_and_grad, warmup_lr
from .numcore.nn import Linear, sinusoidal_features

log = logging.getLogger(__name__)


class VelocityField(Protocol):
    latent_shape: tuple[int, int]

    def __call__(self, z: np.ndarray, t, f: np.ndarray | None) -> np.ndarray: ...


@dataclass(frozen=True)
class FlowTrainConfig:
    lr: float = 1e-3
    batch: int = 256
    warmup: int = 400
    steps: int = 4000
    p: float = 0.0
    eval_every: int = 250
    hidden: int = 128
    n_blocks: int = 3
    time_dim: int = 32
    cond_dim: int = 64
    weight_decay: float = 0.0
    stochastic_latents: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"dropout p={self.p} outside [0, 1]")
        if self.lr <= 0 or self.batch <= 0 or self.steps <= 0:
            raise ConfigError("lr, batch and steps must be positive")
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 40
    w: float = 0.0
    target: float | None = None
    n: int = 512
    top_k: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.n < 0 or self.top_k < 0:
            raise ConfigError("n and top_k must be non-negative")


class VelocityModel:
    """Residual feed-forward trunk on the flattened latent with FiLM conditioning.

    The conditioning vector is ``gelu(time_embedding(t) + e)`` where ``e`` is
    an affine embedding of the standardised fitness, or the learned null
    embedding for unconditional evaluations.
    """

    def __init__(
        self,
        latent_shape: tuple[int, int],
        hidden: int = 128,
        n_blocks: int = 3,
        time_dim: int = 32,
        cond_dim: int = 64,
        f_mean: float = 0.0,
        f_std: float = 1.0,
        seed: int = 0,
    ):
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.hidden, self.n_blocks, self.time_dim, self.cond_dim = hidden, n_blocks, time_dim, cond_dim
        self.f_mean, self.f_std = float(f_mean), float(f_std) if f_std > 0 else 1.0
        n_lat = int(np.prod(self.latent_shape))
        rng = np.random.default_rng([seed, 20])
        s = self.store = ParamStore()
        self.t1 = Linear(s, "time.l1", time_dim, cond_dim, rng)
        self.t2 = Linear(s, "time.l2", cond_dim, cond_dim, rng)
        self.fit = Linear(s, "fitness.embed", 1, cond_dim, rng)
        self.null = s.add("fitness.null", rng.normal(0.0, 1.0, cond_dim))
        self.inp = Linear(s, "trunk.in", n_lat, hidden, rng)
        self.blocks = [
            (
                Linear(s, f"trunk.block{i}.film", cond_dim, 2 * hidden, rng, zero=True),
                Linear(s, f"trunk.block{i}.ff1", hidden, 2 * hidden, rng),
                Linear(s, f"trunk.block{i}.ff2", 2 * hidden, hidden, rng),
            )
            for i in range(n_blocks)
        ]
        self.out = Linear(s, "trunk.out", hidden, n_lat, rng)
        self.n_evals = 0
        self.fitness_reads = 0
        self.null_uses = 0

    def forward(self, z, t, f: np.ndarray | None, cond_mask: np.ndarray | None = None) -> Tensor:
        """Velocity for a batch. ``f=None`` (or a False mask entry) selects the null condition."""
        z = ops.as_tensor(z)
        if z.shape[1:] != self.latent_shape:
            raise ContractError(f"latent shape {z.shape[1:]} does not match model {self.latent_shape}")
        B = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        self.n_evals += 1

        te = self.t2(ops.gelu(self.t1(sinusoidal_features(1000.0 * t, self.time_dim))))
        null = ops.reshape(self.null, (1, self.cond_dim))
        if f is None:
            self.null_uses += B
            e = null
        else:
            mask = np.ones(B, dtype=bool) if cond_mask is None else np.asarray(cond_mask, dtype=bool)
            f = np.broadcast_to(np.asarray(f, dtype=np.float64), (B,))
            # Dropped items never see their fitness value.
            f_in = np.where(mask, (np.where(mask, f, self.f_mean) - self.f_mean) / self.f_std, 0.0)
            n_cond = int(mask.sum())
            self.fitness_reads += n_cond
            self.null_uses += B - n_cond
            m = mask[:, None].astype(np.float64)
            e = ops.add(ops.mul(self.fit(f_in[:, None]), m), ops.mul(null, 1.0 - m))
        c = ops.gelu(ops.add(te, e))

        x = self.inp(ops.reshape(z, (B, -1)))
        H = self.hidden
        for film, ff1, ff2 in self.blocks:
            mod = film(c)
            hn = ops.layer_norm(x)
            hn = ops.add(ops.mul(hn, ops.add(mod[:, :H], 1.0)), mod[:, H:])
            x = ops.add(x, ff2(ops.gelu(ff1(hn))))
        out = self.out(ops.layer_norm(x))
        return ops.reshape(out, (B,) + self.latent_shape)

    def __call__(self, z: np.ndarray, t, f: np.ndarray | None) -> np.ndarray:
        return self.forward(z, t, f).data

    def meta(self) -> dict:
        return {
            "latent_shape": list(self.latent_shape),
            "hidden": self.hidden,
            "n_blocks": self.n_blocks,
            "time_dim": self.time_dim,
            "cond_dim": self.cond_dim,
            "f_mean": self.f_mean,
            "f_std": self.f_std,
        }

    @classmethod
    def from_meta(cls, meta: dict, state: dict) -> VelocityModel:
        m = cls(
            tuple(meta["latent_shape"]),
            meta["hidden"],
            meta["n_blocks"],
            meta["time_dim"],
            meta["cond_dim"],
            meta["f_mean"],
            meta["f_std"],
        )
        m.store.load_state_dict(state)
        return m


def interpolate(z0, z1, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t={t} outside [0, 1]")
    z0, z1 = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ContractError(f"z0 {z0.shape} and z1 {z1.shape} differ in shape")
    return (1.0 - t) * z0 + t * z1


def cfm_loss(model: VelocityModel, z1: np.ndarray, f: np.ndarray, rng: np.random.Generator, p: float) -> Tensor:
    """Batch mean of ``||v(z_t, t, f or null) - (z1 - z0)||^2``.

    Draw order from ``rng``: t (B,), then z0 (B, l, d), then the dropout
    uniforms (B,).
    """
    z1 = np.asarray(z1, dtype=np.float64)
    B = len(z1)
    if B == 0:
        raise ContractError("cfm_loss needs a non-empty batch")
    t = rng.random(B)
    z0 = rng.standard_normal(z1.shape)
    keep = rng.random(B) >= p
    tt = t.reshape((B,) + (1,) * (z1.ndim - 1))
    zt = (1.0 - tt) * z0 + tt * z1
    pred = model.forward(zt, t, f, cond_mask=keep)
    if not np.all(np.isfinite(pred.data)):
        raise TrainingError("velocity model produced non-finite output")
    err = ops.sub(pred, z1 - z0)
    per_item = ops.tsum(ops.reshape(ops.square(err), (B, -1)), axis=1)
    return ops.mean(per_item)


def cfg_velocity(model: VelocityField, z: np.ndarray, t, f, w: float) -> np.ndarray:
    """Guided velocity; one model evaluation when ``w == 0``, two otherwise."""
    v_cond = model(z, t, f)
    if w == 0:
        return v_cond
    v_uncond = model(z, t, None)
    return (1.0 + w) * v_cond - w * v_uncond


def euler_integrate(model: VelocityField, z0: np.ndarray, f, w: float, K: int) -> np.ndarray:
    if K < 1:
        raise ConfigError("K must be >= 1")
    z = np.array(z0, dtype=np.float64)
    dt = 1.0 / K
    for k in range(K):
        z = z + dt * cfg_velocity(model, z, k / K, f, w)
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite latent state at Euler step {k}")
    return z


def euler_sample(model: VelocityField, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """``cfg.n`` latents integrated from ``z0 ~ N(0, I)`` drawn from ``rng``."""
    cfg.validate()
    z0 = rng.standard_normal((cfg.n,) + tuple(model.latent_shape))
    f = None if cfg.target is None else np.full(cfg.n, cfg.target)
    return euler_integrate(model, z0, f, cfg.w, cfg.K)


def initial_noise(latent_shape: Sequence[int], n: int, seed: int, offset: int = 0) -> np.ndarray:
    """Per-sample noise from seeds ``(seed, offset + i)`` so results do not depend on batching."""
    shape = tuple(latent_shape)
    if n == 0:
        return np.zeros((0,) + shape)
    return np.stack([np.random.default_rng([seed, offset + i]).standard_normal(shape) for i in range(n)])


def generate(model: VelocityModel, codec, cfg: SamplerConfig) -> list[str]:
    """Sample ``cfg.n`` latents at ``cfg.target`` and decode them through the frozen codec."""
    cfg.validate()
    if tuple(model.latent_shape) != tuple(codec.latent_shape):
        raise ConfigError(f"flow latent shape {model.latent_shape} != codec latent shape {codec.latent_shape}")
    if cfg.target is None:
        raise ConfigError("sampler target fitness is unset; calibrate or configure it")
    if cfg.n == 0:
        return []
    z0 = initial_noise(model.latent_shape, cfg.n, cfg.seed)
    z1 = euler_integrate(model, z0, np.full(cfg.n, float(cfg.target)), cfg.w, cfg.K)
    return codec.sequences_from_latents(z1)


# ---------------------------------------------------------------- training


@dataclass
class FlowHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_val: float = float("inf")
    null_fraction: float = 0.0

    def summary(self) -> dict:
        return {
            "steps": len(self.train_loss),
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "best_step": self.best_step,
            "best_val": self.best_val,
            "null_fraction": self.null_fraction,
        }


def train_flow(
    latents: np.ndarray,
    fitness: np.ndarray,
    config: FlowTrainConfig = FlowTrainConfig(),
    latent_logvar: np.ndarray | None = None,
    init_state: dict | None = None,
) -> tuple[VelocityModel, FlowHistory]:
    """Fit a velocity model on (posterior-mean latent, fitness) pairs; returns the best-by-validation model.

    ``init_state`` warm-starts from an existing parameter set of the same architecture.
    """
    config.validate()
    z = np.asarray(latents, dtype=np.float64)
    f = np.asarray(fitness, dtype=np.float64)
    if len(z) == 0:
        raise ContractError("train_flow needs a non-empty dataset")
    if len(f) != len(z):
        raise ContractError("latents and fitness differ in length")
    if config.stochastic_latents and latent_logvar is None:
        raise ConfigError("stochastic_latents requires latent_logvar")
    rng = np.random.default_rng([config.seed, 21])
    if len(z) >= 5:
        tr, va = split_indices(len(z), rng)
    else:
        tr = va = np.arange(len(z))
    model = VelocityModel(
        z.shape[1:],
        config.hidden,
        config.n_blocks,
        config.time_dim,
        config.cond_dim,
        f_mean=float(f[tr].mean()),
        f_std=float(f[tr].std()),
        seed=config.seed,
    )
    if init_state is not None:
        model.store.load_state_dict(init_state)
    history = FlowHistory()

    def val_loss() -> float:
        vr = np.random.default_rng([config.seed, 22])
        total = 0.0
        for _ in range(4):
            total += cfm_loss(model, z[va], f[va], vr, 0.0).item()
        return total / 4

    best_state = model.store.state_dict()
    drop_null = drop_total = 0
    for step in range(config.steps):
        b = rng.choice(tr, size=min(config.batch, len(tr)), replace=len(tr) < config.batch)
        z1 = z[b]
        if config.stochastic_latents:
            z1 = z1 + np.exp(0.5 * latent_logvar[b]) * rng.standard_normal(z1.shape)
        before_null, before_cond = model.null_uses, model.fitness_reads
        try:
            value, grads = value_and_grad(model.store, lambda: cfm_loss(model, z1, f[b], rng, config.p))
            adam_update(model.store, grads, warmup_lr(config.lr, step, config.warmup), weight_decay=config.weight_decay)
        except TrainingError as exc:
            raise TrainingError(f"flow training diverged at step {step}: {exc}") from exc
        drop_null += model.null_uses - before_null
        drop_total += (model.null_uses - before_null) + (model.fitness_reads - before_cond)
        history.train_loss.append(value)
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            cur = val_loss()
            history.val_loss.append((step + 1, cur))
            if cur < history.best_val:
                history.best_val, history.best_step = cur, step + 1
                best_state = model.store.state_dict()
    model.store.load_state_dict(best_state)
    history.null_fraction = drop_null / max(drop_total, 1)
    model.n_evals = model.fitness_reads = model.null_uses = 0
    log.info("flow training: best val %.5g at step %d", history.best_val, history.best_step)
    return model, history


# ---------------------------------------------------------------- target calibration


def default_target_grid(train_fitness: np.ndarray, n: int = 8, span: float = 4.0) -> list[float]:
    """Candidate targets from the training maximum up to ``span`` training ranges beyond it."""
    f = np.asarray(train_fitness, dtype=np.float64)
    width = max(float(np.ptp(f)), 1e-3)
    return [float(v) for v in np.linspace(f.max(), f.max() + span * width, n)]


def calibrate_target(
    model: VelocityModel,
    codec,
    ranker,
    candidates: Sequence[float],
    w: float,
    K: int = 40,
    n: int = 512,
    top_k: int | None = 128,
    seed: int = 1000,
) -> tuple[float, list[dict]]:
    """Pick the candidate target whose batch has the highest ranker-predicted median.

    The score mirrors evaluation: draw ``n`` samples, keep the ``top_k`` the
    ranker prefers, take the median of their predicted fitness. Only the
    ranking predictor scores samples here, never the oracle.
    """
    if not candidates:
        raise ConfigError("calibration needs at least one candidate target")
    table = []
    for target in candidates:
        cfg = SamplerConfig(K=K, w=w, target=float(target), n=n, top_k=0, seed=seed)
        pred = np.sort(np.asarray(ranker.predict(generate(model, codec, cfg))))[::-1]
        if top_k:
            pred = pred[: min(top_k, len(pred))]
        table.append({"target": float(target), "predicted_median": float(np.median(pred))})
    best = max(range(len(table)), key=lambda i: (table[i]["predicted_median"], -i))
    return table[best]["target"], table
