"""Continuous sequence representation: embedder, decoder, compressor and decompressor.

The stack maps ``x -> h (L x D) -> (mu, logvar) (l x d) -> z -> h' -> logits``.
Training follows either a two-stage schedule (decoder first, then the
compressor/decompressor pair against the frozen decoder) or a one-stage
joint schedule.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError, TrainingError
from .landscape import split_indices
from .numcore import ParamStore, Tensor, adam_update, ops, value_and_grad, warmup_lr
from .numcore.nn import Conv1d, ConvTranspose1d, Linear, TransformerBlock, sinusoidal_features
from .seqkit import Vocabulary

log = logging.getLogger(__name__)


def _factor_strides(total: int) -> list[int]:
    """Split a length-reduction factor into at most two balanced strides."""
    if total == 1:
        return []
    primes, n, p = [], total, 2
    while n > 1:
        while n % p == 0:
            primes.append(p)
            n //= p
        p += 1
    a = b = 1
    for q in sorted(primes, reverse=True):
        if a <= b:
            a *= q
        else:
            b *= q
    return [s for s in sorted((a, b)) if s > 1]


@dataclass(frozen=True)
class StageConfig:
    lr: float
    batch: int = 128
    warmup: int = 200
    max_epochs: int = 30
    patience: int = 8
    eval_every: int = 50


@dataclass(frozen=True)
class CodecConfig:
    vocab: str = "ACGT"
    length: int = 10
    embed_dim: int = 32
    latent_dim: int = 8
    compression: int = 20
    decoder_hidden: int = 64
    mix_hidden: int = 64
    mix_blocks: int = 1
    logvar_min: float = -8.0
    logvar_max: float = 8.0
    beta: float = 1e-4
    stage_mode: str = "two_stage"
    embedder_frozen: bool = True
    stage1: StageConfig = field(default_factory=lambda: StageConfig(lr=2e-3, warmup=50, max_epochs=30, eval_every=50))
    stage2: StageConfig = field(
        default_factory=lambda: StageConfig(lr=2e-3, warmup=200, max_epochs=400, eval_every=100, patience=8)
    )
    seed: int = 0

    @property
    def latent_length(self) -> int:
        total = self.length * self.embed_dim
        per_latent = self.compression * self.latent_dim
        if total % per_latent:
            raise ConfigError(
                f"L*D={total} is not divisible by compression*latent_dim={per_latent}"
            )
        return total // per_latent

    @property
    def strides(self) -> list[int]:
        l = self.latent_length
        if l < 1 or self.length % l:
            raise ConfigError(f"sequence length {self.length} not divisible by latent length {l}")
        return _factor_strides(self.length // l)

    def validate(self) -> None:
        Vocabulary(self.vocab)
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.stage_mode not in ("two_stage", "one_stage"):
            raise ConfigError(f"unknown stage_mode {self.stage_mode!r}")
        if not self.logvar_min < self.logvar_max:
            raise ConfigError("logvar bounds must satisfy min < max")
        l = self.latent_length
        _ = self.strides
        if not (l <= self.length and self.latent_dim < self.embed_dim):
            raise ConfigError(f"latent {l}x{self.latent_dim} must be smaller than {self.length}x{self.embed_dim}")
        if l * self.latent_dim >= self.length * self.embed_dim:
            raise ConfigError("latent must be strictly smaller than the embedding")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CodecConfig:
        d = dict(d)
        for key in ("stage1", "stage2"):
            if isinstance(d.get(key), dict):
                d[key] = StageConfig(**d[key])
        return cls(**d)


@dataclass
class LatentSample:
    z: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    xi: np.ndarray


class Codec:
    """Embedder E, decoder D, compressor C and decompressor R sharing one ParamStore."""

    def __init__(self, config: CodecConfig):
        config.validate()
        self.config = config
        self.vocab = Vocabulary(config.vocab)
        L, D, d = config.length, config.embed_dim, config.latent_dim
        self.latent_shape = (config.latent_length, d)
        rng = np.random.default_rng([config.seed, 10])
        s = self.store = ParamStore()

        self.table = s.add("embedder.table", rng.standard_normal((len(self.vocab), D)))
        self.positional = sinusoidal_features(np.arange(L), D)
        self.mix = Linear(s, "embedder.mix", D, D, rng)

        self.dec1 = Linear(s, "decoder.l1", D, config.decoder_hidden, rng)
        self.dec2 = Linear(s, "decoder.l2", config.decoder_hidden, len(self.vocab), rng)

        self.c_blocks = [
            TransformerBlock(s, f"compressor.block{i}", D, config.mix_hidden, rng) for i in range(config.mix_blocks)
        ]
        self.c_convs = [
            Conv1d(s, f"compressor.conv{i}", D, D, st, st, rng) for i, st in enumerate(config.strides)
        ]
        self.c_mu = Linear(s, "compressor.mu", D, d, rng)
        self.c_logvar = Linear(s, "compressor.logvar", D, d, rng, zero=True)

        self.r_in = Linear(s, "decompressor.in", d, D, rng)
        self.r_convs = [
            ConvTranspose1d(s, f"decompressor.up{i}", D, D, st, st, rng)
            for i, st in enumerate(reversed(config.strides))
        ]
        self.r_blocks = [
            TransformerBlock(s, f"decompressor.block{i}", D, config.mix_hidden, rng) for i in range(config.mix_blocks)
        ]
        self.r_out = Linear(s, "decompressor.out", D, D, rng)

        if config.embedder_frozen:
            s.freeze("embedder.")

    # -- forward pieces (Tensor in, Tensor out) --------------------------------

    def embed(self, codes: np.ndarray) -> Tensor:
        e = ops.add(ops.take_rows(self.table, codes), self.positional)
        return ops.gelu(self.mix(e))

    def decoder_logits(self, h) -> Tensor:
        h = ops.as_tensor(h)
        if h.shape[-2:] != (self.config.length, self.config.embed_dim):
            raise ContractError(f"decoder expects (..., {self.config.length}, {self.config.embed_dim}), got {h.shape}")
        return self.dec2(ops.gelu(self.dec1(h)))

    def compress(self, h) -> tuple[Tensor, Tensor]:
        x = ops.as_tensor(h)
        if x.shape[-2:] != (self.config.length, self.config.embed_dim):
            raise ContractError(f"compressor expects (..., {self.config.length}, {self.config.embed_dim}), got {x.shape}")
        for blk in self.c_blocks:
            x = blk(x)
        for conv in self.c_convs:
            x = ops.gelu(conv(x))
        mu = self.c_mu(x)
        logvar = ops.clip(self.c_logvar(x), self.config.logvar_min, self.config.logvar_max)
        return mu, logvar

    def decompress(self, z) -> Tensor:
        x = self.r_in(ops.as_tensor(z))
        for up in self.r_convs:
            x = ops.gelu(up(x))
        for blk in self.r_blocks:
            x = blk(x)
        return self.r_out(x)

    # -- numpy conveniences --------------------------------------------------------

    def codes(self, seqs: Sequence[str]) -> np.ndarray:
        return self.vocab.encode_many(list(seqs))

    def encode(self, seqs: Sequence[str]) -> np.ndarray:
        return self.embed(self.codes(seqs)).data

    def decode_sequence(self, h) -> tuple[np.ndarray, list[str]]:
        logits = self.decoder_logits(h).data
        # np.argmax returns the first maximum: ties go to the lowest symbol index.
        return logits, self.vocab.decode_many(np.argmax(logits, axis=-1))

    def latents(self, seqs: Sequence[str] | None = None, h: np.ndarray | None = None) -> np.ndarray:
        """Posterior means for sequences (via the embedder) or for precomputed embeddings."""
        if h is None:
            h = self.encode(seqs)
        return self.compress(h)[0].data

    def sequences_from_latents(self, z: np.ndarray) -> list[str]:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-2:] != self.latent_shape:
            raise ContractError(f"latent shape {z.shape[-2:]} does not match codec {self.latent_shape}")
        if len(z) == 0:
            return []
        return self.decode_sequence(self.decompress(z))[1]

    def round_trip(self, seqs: Sequence[str], h: np.ndarray | None = None) -> list[str]:
        return self.sequences_from_latents(self.latents(seqs, h))

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "latent_shape": list(self.latent_shape)}

    @classmethod
    def from_meta(cls, meta: dict, state: dict) -> Codec:
        codec = cls(CodecConfig.from_dict(meta["config"]))
        codec.store.load_state_dict(state)
        return codec


def reparameterize(mu, logvar, rng: np.random.Generator | None = None, xi: np.ndarray | None = None) -> LatentSample:
    mu = np.asarray(getattr(mu, "data", mu), dtype=np.float64)
    logvar = np.asarray(getattr(logvar, "data", logvar), dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ContractError(f"mu {mu.shape} and logvar {logvar.shape} differ in shape")
    if xi is None:
        xi = rng.standard_normal(mu.shape)
    return LatentSample(z=mu + np.exp(0.5 * logvar) * xi, mu=mu, logvar=logvar, xi=xi)


def kl_divergence(mu, logvar) -> Tensor:
    """Analytic KL(N(mu, exp(logvar)) || N(0, I)): summed over latent coordinates, mean over batch."""
    mu, logvar = ops.as_tensor(mu), ops.as_tensor(logvar)
    per = ops.sub(ops.sub(ops.add(ops.square(mu), ops.exp(logvar)), 1.0), logvar)
    if mu.ndim <= 2:
        return ops.mul(ops.tsum(per), 0.5)
    per_item = ops.tsum(ops.reshape(per, (per.shape[0], -1)), axis=1)
    return ops.mul(ops.mean(per_item), 0.5)


def vae_loss(h, h_rec, x_codes, logits, mu, logvar, beta: float) -> Tensor:
    """MSE(h, h') + CE(x, logits) + beta * KL."""
    if beta < 0:
        raise ConfigError("beta must be non-negative")
    h, h_rec = ops.as_tensor(h), ops.as_tensor(h_rec)
    if h.shape != h_rec.shape:
        raise ContractError(f"h {h.shape} and h' {h_rec.shape} differ in shape")
    mse = ops.mean(ops.square(ops.sub(h_rec, h)))
    ce = ops.cross_entropy(logits, x_codes)
    return ops.add(ops.add(mse, ce), ops.mul(kl_divergence(mu, logvar), beta))


# ---------------------------------------------------------------- training


@dataclass
class CodecHistory:
    stage_mode: str
    stages: list[dict] = field(default_factory=list)
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")
    position_accuracy: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _stochastic_loss(codec: Codec, h: np.ndarray, codes: np.ndarray, xi: np.ndarray | None) -> Tensor:
    mu, logvar = codec.compress(h)
    z = mu if xi is None else ops.add(mu, ops.mul(ops.exp(ops.mul(logvar, 0.5)), xi))
    h_rec = codec.decompress(z)
    logits = codec.decoder_logits(h_rec)
    return vae_loss(h, h_rec, codes, logits, mu, logvar, codec.config.beta)


def _run_stage(
    name: str,
    codec: Codec,
    trainable: list[str],
    stage: StageConfig,
    n_train: int,
    batch_loss,
    heldout_loss,
    rng: np.random.Generator,
) -> dict:
    store = codec.store
    steps_per_epoch = max(1, int(np.ceil(n_train / stage.batch)))
    max_steps = stage.max_epochs * steps_per_epoch
    best = heldout_loss()
    best_state = {n: store[n].data.copy() for n in trainable}
    bad, step, evals = 0, 0, []
    stopped_early = False
    for _epoch in range(stage.max_epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, stage.batch):
            b = order[start : start + stage.batch]
            try:
                value, grads = value_and_grad(store, lambda: batch_loss(b), trainable)
                adam_update(store, grads, warmup_lr(stage.lr, step, stage.warmup))
            except TrainingError as exc:
                raise TrainingError(f"codec stage {name!r} diverged at step {step}: {exc}") from exc
            step += 1
            if step % stage.eval_every == 0 or step == max_steps:
                cur = heldout_loss()
                evals.append((step, value, cur))
                if not np.isfinite(cur):
                    raise TrainingError(f"codec stage {name!r} held-out loss diverged at step {step}")
                if cur < best:
                    best, bad = cur, 0
                    best_state = {n: store[n].data.copy() for n in trainable}
                else:
                    bad += 1
                    if bad >= stage.patience:
                        stopped_early = True
                        break
        if stopped_early:
            break
    for n, arr in best_state.items():
        store[n].data = arr
    store.reset_optimizer()
    log.info("codec stage %s: %d steps, best held-out loss %.5g", name, step, best)
    return {"stage": name, "steps": step, "best_heldout_loss": float(best), "stopped_early": stopped_early}


def train_codec(
    seqs: Sequence[str], config: CodecConfig = CodecConfig(), embeddings: np.ndarray | None = None
) -> tuple[Codec, CodecHistory]:
    """Train a codec on ``seqs``; ``embeddings`` (N, L, D) replaces the toy embedder when given."""
    if len(seqs) == 0:
        raise ContractError("train_codec needs a non-empty dataset")
    codec = Codec(config)
    codes = codec.codes(seqs)
    if embeddings is not None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != (len(seqs), config.length, config.embed_dim):
            raise ContractError(f"embeddings shape {embeddings.shape} inconsistent with config")
    rng = np.random.default_rng([config.seed, 11])
    tr, va = split_indices(len(seqs), rng) if len(seqs) > 1 else (np.arange(1), np.arange(1))
    history = CodecHistory(stage_mode=config.stage_mode)

    def embeddings_now() -> np.ndarray:
        return embeddings if embeddings is not None else codec.embed(codes).data

    store = codec.store
    stage = config.stage2

    if config.stage_mode == "two_stage":
        train_embedder = embeddings is None and not config.embedder_frozen
        H = embeddings_now()

        def ce_loss(b):
            h = codec.embed(codes[tr[b]]) if train_embedder else H[tr[b]]
            return ops.cross_entropy(codec.decoder_logits(h), codes[tr[b]])

        def ce_heldout():
            h = embeddings_now()[va]
            return ops.cross_entropy(codec.decoder_logits(h), codes[va]).item()

        names = store.trainable("decoder.") + (store.trainable("embedder.") if train_embedder else [])
        history.stages.append(_run_stage("decoder", codec, names, config.stage1, len(tr), ce_loss, ce_heldout, rng))
        store.freeze("decoder.")
        store.freeze("embedder.")
        names = store.trainable("compressor.") + store.trainable("decompressor.")
        stage_name = "compression"
    else:
        names = store.trainable("decoder.") + store.trainable("compressor.") + store.trainable("decompressor.")
        stage_name = "joint"

    H = embeddings_now()
    def stage2_loss(b):
        xi = rng.standard_normal((len(b),) + codec.latent_shape)
        return _stochastic_loss(codec, H[tr[b]], codes[tr[b]], xi)

    def stage2_heldout():
        return _stochastic_loss(codec, H[va], codes[va], None).item()

    history.stages.append(_run_stage(stage_name, codec, names, stage, len(tr), stage2_loss, stage2_heldout, rng))
    store.freeze("")

    history.train_accuracy = round_trip_accuracy(codec, [seqs[i] for i in tr], None if embeddings is None else H[tr])
    history.heldout_accuracy = round_trip_accuracy(codec, [seqs[i] for i in va], None if embeddings is None else H[va])
    history.position_accuracy = position_accuracy(codec, list(seqs), None if embeddings is None else H)
    return codec, history


def round_trip_accuracy(codec: Codec, seqs: Sequence[str], h: np.ndarray | None = None) -> float:
    """Fraction of sequences reproduced exactly by x -> mu -> h' -> argmax."""
    if len(seqs) == 0:
        return float("nan")
    back = codec.round_trip(seqs, h)
    return float(np.mean([a == b for a, b in zip(seqs, back)]))


def position_accuracy(codec: Codec, seqs: Sequence[str], h: np.ndarray | None = None) -> float:
    back = codec.round_trip(seqs, h)
    return float(np.mean(codec.codes(seqs) == codec.codes(back)))


# ---------------------------------------------------------------- embedding files

EMB_MAGIC = b"LFEMB1"
_EMB_HEADER = struct.Struct("<III")


def write_embeddings(path: str | Path, records: Sequence[tuple[np.ndarray, str]]) -> None:
    """Write (h, sequence) records; all h must share one (L, D) shape."""
    if records:
        L, D = np.shape(records[0][0])
    else:
        L = D = 0
    parts = [EMB_MAGIC, _EMB_HEADER.pack(len(records), L, D)]
    for h, seq in records:
        h = np.asarray(h)
        if h.shape != (L, D):
            raise ContractError(f"embedding shape {h.shape} differs from header ({L}, {D})")
        raw = seq.encode("utf-8")
        parts.append(h.astype("<f4").tobytes())
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path: str | Path) -> list[tuple[np.ndarray, str]]:
    blob = Path(path).read_bytes()
    if blob[:6] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic/version {blob[:6]!r}, expected {EMB_MAGIC!r}")
    if len(blob) < 6 + _EMB_HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}")
    count, L, D = _EMB_HEADER.unpack_from(blob, 6)
    pos = 6 + _EMB_HEADER.size
    min_size = pos + count * (4 * L * D + 2)
    if len(blob) < min_size:
        # Locate the first record that runs past the end for the message.
        rec = (len(blob) - pos) // (4 * L * D + 2) if L * D else 0
        raise FormatError(
            f"{path}: truncated payload; record {rec} at byte offset {len(blob)} (need >= {min_size} bytes for "
            f"{count} records of {L}x{D})"
        )
    out = []
    for i in range(count):
        end = pos + 4 * L * D
        if end + 2 > len(blob):
            raise FormatError(f"{path}: truncated record {i} at byte offset {pos}")
        h = np.frombuffer(blob[pos:end], dtype="<f4").reshape(L, D).astype(np.float64)
        (n,) = struct.unpack_from("<H", blob, end)
        pos = end + 2
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated sequence of record {i} at byte offset {pos}")
        out.append((h, blob[pos : pos + n].decode("utf-8")))
        pos += n
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} unexpected trailing bytes at byte offset {pos}")
    return out
