"""Synthetic epistatic fitness landscapes, restricted benchmark subsets, and a ranking predictor.

A :class:`Landscape` plays the part of the held-out ground truth: it scores
any sequence, but every scoring call through :meth:`Landscape.oracle_score`
is counted by :data:`ORACLE_AUDIT` so that pipelines can prove the oracle
was only used for evaluation.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError, ConstructionError, ContractError, TrainingError
from .numcore import ParamStore, adam_update, ops, value_and_grad
from .numcore.nn import Linear
from .seqkit import Vocabulary

log = logging.getLogger(__name__)

ENUMERATION_LIMIT = 10_000_000
TOP_FRACTION = 0.01


class OracleAudit:
    """Thread-safe per-phase counter of oracle scoring calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self._local = threading.local()
        self.counts: dict[str, int] = {}

    @property
    def current_phase(self) -> str:
        return getattr(self._local, "phase", "unscoped")

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        prev = self.current_phase
        self._local.phase = name
        with self._lock:
            self.counts.setdefault(name, 0)
        try:
            yield
        finally:
            self._local.phase = prev

    def record(self, n: int) -> None:
        with self._lock:
            key = self.current_phase
            self.counts[key] = self.counts.get(key, 0) + n

    def reset(self) -> None:
        with self._lock:
            self.counts.clear()

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(sorted(self.counts.items()))


ORACLE_AUDIT = OracleAudit()


@dataclass(frozen=True)
class LandscapeSpec:
    vocab: str = "ACGT"
    length: int = 10
    n_epistatic_terms: int = 30
    seed: int = 0
    gt_sample_size: int = 50_000

    def validate(self) -> None:
        Vocabulary(self.vocab)
        if self.length < 2:
            raise ConfigError("landscape length must be >= 2")
        n_pairs = self.length * (self.length - 1) // 2
        if not 0 <= self.n_epistatic_terms <= n_pairs:
            raise ConfigError(
                f"n_epistatic_terms={self.n_epistatic_terms} exceeds the {n_pairs} available position pairs"
            )
        if self.gt_sample_size < 1:
            raise ConfigError("gt_sample_size must be positive")


def _index_to_codes(idx: np.ndarray, n_symbols: int, length: int) -> np.ndarray:
    # Position 0 is the most significant digit, matching C-order reshape to (V,)*L.
    powers = n_symbols ** np.arange(length - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] // powers) % n_symbols).astype(np.int8)


class Landscape:
    """Additive per-(position, symbol) field plus pairwise epistatic terms.

    ``raw(x) = sum_p additive[p, x_p] + sum_t weight_t * [x_i == a and x_j == b]``,
    normalised to [0, 1] by the landscape extrema (exact under enumeration,
    otherwise estimated on a uniform ground-truth sample and clipped).
    """

    def __init__(self, spec: LandscapeSpec, additive: np.ndarray, epistatic: np.ndarray):
        spec.validate()
        self.spec = spec
        self.vocab = Vocabulary(spec.vocab)
        self.length = spec.length
        self.additive = np.asarray(additive, dtype=np.float64)
        # columns: i, j, a, b, weight
        self.epistatic = np.asarray(epistatic, dtype=np.float64).reshape(-1, 5)
        if self.additive.shape != (self.length, len(self.vocab)):
            raise ConfigError(f"additive field shape {self.additive.shape} inconsistent with spec")
        if np.any(self.epistatic[:, 0] == self.epistatic[:, 1]):
            raise ConfigError("epistatic terms need two distinct positions")
        self.enumerable = len(self.vocab) ** self.length <= ENUMERATION_LIMIT
        self._gt_codes, self._gt_raw = self._ground_truth()
        self.raw_min = float(self._gt_raw.min())
        self.raw_max = float(self._gt_raw.max())
        if not self.raw_max > self.raw_min:
            raise ConstructionError("landscape is flat; cannot normalise")

    @property
    def n_symbols(self) -> int:
        return len(self.vocab)

    def _ground_truth(self) -> tuple[np.ndarray, np.ndarray]:
        V, L = self.n_symbols, self.length
        if self.enumerable:
            idx = np.arange(V**L, dtype=np.int64)
            codes = _index_to_codes(idx, V, L)
        else:
            rng = np.random.default_rng([self.spec.seed, 1])
            codes = rng.integers(0, V, size=(self.spec.gt_sample_size, L)).astype(np.int8)
        return codes, self.raw_codes(codes)

    def raw_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.length:
            raise ContractError(f"expected (N, {self.length}) codes, got {codes.shape}")
        out = self.additive[np.arange(self.length), codes].sum(axis=1)
        for i, j, a, b, w in self.epistatic:
            out += w * ((codes[:, int(i)] == a) & (codes[:, int(j)] == b))
        return out

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        norm = (np.asarray(raw) - self.raw_min) / (self.raw_max - self.raw_min)
        return norm if self.enumerable else np.clip(norm, 0.0, 1.0)

    def _codes(self, seqs: Sequence[str]) -> np.ndarray:
        for s in seqs:
            if len(s) != self.length:
                raise ContractError(f"sequence {s!r} has length {len(s)}, landscape length is {self.length}")
        return self.vocab.encode_many(list(seqs)) if seqs else np.zeros((0, self.length), dtype=np.int64)

    def oracle_score(self, seqs: str | Sequence[str]) -> np.ndarray | float:
        """Normalised ground-truth fitness; each scored sequence is counted by the audit."""
        single = isinstance(seqs, str)
        batch = [seqs] if single else list(seqs)
        codes = self._codes(batch)
        ORACLE_AUDIT.record(len(batch))
        scores = self.normalize(self.raw_codes(codes))
        return float(scores[0]) if single else scores

    def ground_truth(self) -> tuple[np.ndarray, np.ndarray]:
        """(codes, normalised fitness) of the full enumeration or the ground-truth sample."""
        return self._gt_codes, self.normalize(self._gt_raw)

    def argmax(self) -> str:
        return self.vocab.decode(self._gt_codes[int(np.argmax(self._gt_raw))])

    def argmin(self) -> str:
        return self.vocab.decode(self._gt_codes[int(np.argmin(self._gt_raw))])

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "additive": self.additive.tolist(),
            "epistatic": [
                {"i": int(i), "j": int(j), "a": int(a), "b": int(b), "weight": float(w)}
                for i, j, a, b, w in self.epistatic
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Landscape:
        epi = np.array([[t["i"], t["j"], t["a"], t["b"], t["weight"]] for t in d["epistatic"]]).reshape(-1, 5)
        return cls(LandscapeSpec(**d["spec"]), np.array(d["additive"]), epi)

    def landscape_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_landscape(spec: LandscapeSpec) -> Landscape:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    V, L = len(spec.vocab), spec.length
    additive = rng.standard_normal((L, V))
    pairs = np.array([(i, j) for i in range(L) for j in range(i + 1, L)], dtype=np.int64).reshape(-1, 2)
    chosen = rng.choice(len(pairs), size=spec.n_epistatic_terms, replace=False)
    epi = np.zeros((spec.n_epistatic_terms, 5))
    if spec.n_epistatic_terms:
        epi[:, :2] = pairs[chosen]
        epi[:, 2:4] = rng.integers(0, V, size=(spec.n_epistatic_terms, 2))
        epi[:, 4] = rng.standard_normal(spec.n_epistatic_terms)
    return Landscape(spec, additive, epi)


# ---------------------------------------------------------------- benchmark subsets

DIFFICULTY_WINDOWS = {"medium": (0.20, 0.40), "hard": (0.00, 0.30)}
DIFFICULTY_GAPS = {"medium": 6, "hard": 7}


@dataclass(frozen=True)
class FitnessRecord:
    sequence: str
    fitness: float

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ContractError(f"fitness {self.fitness} outside [0, 1]")


@dataclass
class BenchmarkSubset:
    records: list[FitnessRecord]
    difficulty: str
    percentile_window: tuple[float, float]
    fitness_window: tuple[float, float]
    min_gap: int
    landscape_id: str
    seed: int = 0
    vocab: str = "ACGT"

    @property
    def sequences(self) -> list[str]:
        return [r.sequence for r in self.records]

    @property
    def fitness(self) -> np.ndarray:
        return np.array([r.fitness for r in self.records], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "difficulty": self.difficulty,
            "percentile_window": list(self.percentile_window),
            "fitness_window": list(self.fitness_window),
            "min_gap": self.min_gap,
            "landscape_id": self.landscape_id,
            "seed": self.seed,
            "vocab": self.vocab,
            "records": [[r.sequence, r.fitness] for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkSubset:
        return cls(
            records=[FitnessRecord(s, float(f)) for s, f in d["records"]],
            difficulty=d["difficulty"],
            percentile_window=tuple(d["percentile_window"]),
            fitness_window=tuple(d["fitness_window"]),
            min_gap=int(d["min_gap"]),
            landscape_id=d["landscape_id"],
            seed=int(d.get("seed", 0)),
            vocab=d.get("vocab", "ACGT"),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "fitness"])
        for r in self.records:
            w.writerow([r.sequence, repr(r.fitness)])
        return buf.getvalue()


def percentile_ranks(raw: np.ndarray) -> np.ndarray:
    """Empirical CDF position in [0, 1] of every entry; ties broken by index."""
    order = np.argsort(raw, kind="stable")
    pct = np.empty(len(raw))
    pct[order] = np.arange(len(raw)) / max(len(raw) - 1, 1)
    return pct


def hamming_to_set(landscape: Landscape, members: np.ndarray) -> np.ndarray:
    """Hamming distance from every ground-truth entry to the nearest flagged member.

    Under enumeration this is an exact separable distance transform on the
    (V,)*L grid: Hamming distance is a sum of per-axis 0/1 costs, so one
    min-plus pass per axis suffices.
    """
    codes, _ = landscape.ground_truth()
    L = landscape.length
    if landscape.enumerable:
        d = np.where(members, 0, L).astype(np.int16).reshape((landscape.n_symbols,) * L)
        for ax in range(L):
            d = np.minimum(d, d.min(axis=ax, keepdims=True) + 1)
        return d.reshape(-1).astype(np.int64)
    targets = codes[members]
    out = np.full(len(codes), L, dtype=np.int64)
    for start in range(0, len(codes), 512):
        block = codes[start : start + 512]
        dist = (block[:, None, :] != targets[None, :, :]).sum(axis=2)
        out[start : start + 512] = dist.min(axis=1)
    return out


def build_benchmark(
    landscape: Landscape,
    difficulty: str = "medium",
    size: int = 2000,
    min_gap: int | None = None,
    seed: int = 0,
) -> BenchmarkSubset:
    """Sample a restricted training subset A from the ground truth.

    Records lie inside the difficulty's percentile window and are at least
    ``min_gap`` substitutions (Hamming) away from every top-1% sequence.
    Sampling within the eligible pool is uniform without replacement.
    """
    if difficulty not in DIFFICULTY_WINDOWS:
        raise ConfigError(f"unknown difficulty {difficulty!r}; expected one of {sorted(DIFFICULTY_WINDOWS)}")
    if size < 1:
        raise ConfigError("subset size must be positive")
    if not landscape.enumerable and landscape.spec.gt_sample_size < 50_000:
        raise ContractError("non-enumerable landscapes need a ground-truth sample of at least 50k sequences")
    lo, hi = DIFFICULTY_WINDOWS[difficulty]
    gap = DIFFICULTY_GAPS[difficulty] if min_gap is None else int(min_gap)
    codes, fitness = landscape.ground_truth()
    pct = percentile_ranks(fitness)
    top = pct >= 1.0 - TOP_FRACTION
    in_window = (pct >= lo) & (pct <= hi)
    dist = hamming_to_set(landscape, top)
    eligible = np.flatnonzero(in_window & (dist >= gap))
    if len(eligible) == 0:
        raise ConstructionError(
            f"no sequences in percentile window [{lo}, {hi}] are >= {gap} mutations from the top 1%"
        )
    if len(eligible) < size:
        log.warning("only %d eligible sequences for requested subset size %d", len(eligible), size)
    rng = np.random.default_rng([seed, 2])
    chosen = np.sort(rng.choice(eligible, size=min(size, len(eligible)), replace=False))
    window_fit = fitness[in_window]
    return BenchmarkSubset(
        records=[FitnessRecord(landscape.vocab.decode(codes[i]), float(fitness[i])) for i in chosen],
        difficulty=difficulty,
        percentile_window=(lo, hi),
        fitness_window=(float(window_fit.min()), float(window_fit.max())),
        min_gap=gap,
        landscape_id=landscape.landscape_id(),
        seed=seed,
        vocab=landscape.spec.vocab,
    )


def top_set(landscape: Landscape) -> np.ndarray:
    """Codes of the top-1% ground-truth sequences."""
    codes, fitness = landscape.ground_truth()
    return codes[percentile_ranks(fitness) >= 1.0 - TOP_FRACTION]


# ---------------------------------------------------------------- ranking predictor


@dataclass(frozen=True)
class RankerConfig:
    hidden: int = 64
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 150
    patience: int = 20
    weight_decay: float = 0.0
    seed: int = 0


class RankingPredictor:
    """Two-hidden-layer GELU network on flattened one-hot sequences."""

    def __init__(self, vocab: Vocabulary, length: int, hidden: int = 64, seed: int = 0):
        self.vocab, self.length, self.hidden = vocab, length, hidden
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        n_in = length * len(vocab)
        self.l1 = Linear(self.store, "l1", n_in, hidden, rng)
        self.l2 = Linear(self.store, "l2", hidden, hidden, rng)
        self.out = Linear(self.store, "out", hidden, 1, rng, zero=True)
        self.y_mean, self.y_std = 0.0, 1.0
        self.val_mse = float("nan")
        self.val_spearman = float("nan")

    def one_hot(self, seqs: Sequence[str]) -> np.ndarray:
        codes = self.vocab.encode_many(list(seqs))
        x = np.zeros((len(seqs), self.length, len(self.vocab)))
        np.put_along_axis(x, codes[..., None], 1.0, axis=-1)
        return x.reshape(len(seqs), -1)

    def _forward(self, x):
        h = ops.gelu(self.l1(x))
        h = ops.gelu(self.l2(h))
        return ops.reshape(self.out(h), (-1,))

    def predict_onehot(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x).data * self.y_std + self.y_mean

    def predict(self, seqs: Sequence[str]) -> np.ndarray:
        if len(seqs) == 0:
            return np.zeros(0)
        return self.predict_onehot(self.one_hot(seqs))

    def meta(self) -> dict:
        return {
            "vocab": self.vocab.symbols,
            "length": self.length,
            "hidden": self.hidden,
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "val_mse": self.val_mse,
            "val_spearman": self.val_spearman,
        }

    @classmethod
    def from_meta(cls, meta: dict, state: dict) -> RankingPredictor:
        r = cls(Vocabulary(meta["vocab"]), meta["length"], meta["hidden"])
        r.store.load_state_dict(state)
        r.y_mean, r.y_std = meta["y_mean"], meta["y_std"]
        r.val_mse, r.val_spearman = meta["val_mse"], meta["val_spearman"]
        return r


def split_indices(n: int, rng: np.random.Generator, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    cut = max(1, min(n - 1, int(round(train_frac * n)))) if n > 1 else n
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def train_ranker(subset: BenchmarkSubset, config: RankerConfig = RankerConfig()) -> RankingPredictor:
    """Fit the predictor to (one-hot, fitness) pairs of A with an 80/20 split."""
    if len(subset) < 100:
        raise ContractError(f"ranker needs >= 100 records, got {len(subset)}")
    seqs = subset.sequences
    model = RankingPredictor(Vocabulary(subset.vocab), len(seqs[0]), config.hidden, config.seed)
    rng = np.random.default_rng([config.seed, 3])
    tr, va = split_indices(len(seqs), rng)
    x = model.one_hot(seqs)
    y = subset.fitness
    model.y_mean = float(y[tr].mean())
    std = float(y[tr].std())
    model.y_std = std if std > 1e-12 else 1.0
    yt = (y - model.y_mean) / model.y_std

    def val_loss() -> float:
        pred = model._forward(x[va]).data
        return float(np.mean((pred - yt[va]) ** 2))

    best, best_state, bad = val_loss(), model.store.state_dict(), 0
    for _epoch in range(config.epochs):
        order = rng.permutation(tr)
        for start in range(0, len(order), config.batch):
            b = order[start : start + config.batch]
            _, grads = value_and_grad(
                model.store, lambda: ops.mean(ops.square(ops.sub(model._forward(x[b]), yt[b])))
            )
            adam_update(model.store, grads, config.lr, weight_decay=config.weight_decay)
        cur = val_loss()
        if not np.isfinite(cur):
            raise TrainingError("ranker validation loss diverged")
        if cur < best - 1e-12:
            best, best_state, bad = cur, model.store.state_dict(), 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.store.load_state_dict(best_state)
    pred = model.predict_onehot(x[va])
    model.val_mse = float(np.mean((pred - y[va]) ** 2))
    if np.ptp(y[va]) > 0 and np.ptp(pred) > 0:
        model.val_spearman = float(spearmanr(pred, y[va]).statistic)
    return model


def rank_topk(predictor, candidates: Sequence[str], k: int) -> list[str]:
    """The ``k`` candidates with highest predicted score; ties keep input order."""
    if k > len(candidates):
        raise ContractError(f"k={k} exceeds {len(candidates)} candidates")
    if k == 0:
        return []
    scores = np.asarray(predictor.predict(list(candidates)), dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:k]
    return [candidates[i] for i in order]
