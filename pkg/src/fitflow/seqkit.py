"""Sequences over a small vocabulary, edit distance, and the benchmark metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, VocabularyError


class Vocabulary:
    """Ordered single-character symbols; index ``i`` is ``symbols[i]``."""

    def __init__(self, symbols: str | Sequence[str]):
        symbols = list(symbols)
        if len(symbols) < 2:
            raise ContractError("vocabulary needs at least two symbols")
        if len(set(symbols)) != len(symbols):
            raise ContractError(f"vocabulary symbols must be unique: {symbols}")
        if any(len(s) != 1 for s in symbols):
            raise ContractError("vocabulary symbols must be single characters")
        self.symbols = "".join(symbols)
        self._index = {s: i for i, s in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.symbols == self.symbols

    def __repr__(self) -> str:
        return f"Vocabulary({self.symbols!r})"

    def encode(self, seq: str) -> np.ndarray:
        try:
            return np.array([self._index[c] for c in seq], dtype=np.int64)
        except KeyError as exc:
            raise VocabularyError(f"symbol {exc.args[0]!r} not in vocabulary {self.symbols!r}") from None

    def encode_many(self, seqs: Sequence[str]) -> np.ndarray:
        """Stack equal-length sequences into an (N, L) index array."""
        if not seqs:
            return np.zeros((0, 0), dtype=np.int64)
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise ContractError(f"sequences of unequal length {sorted(lengths)}")
        return np.stack([self.encode(s) for s in seqs])

    def decode(self, idx: Iterable[int]) -> str:
        return "".join(self.symbols[int(i)] for i in idx)

    def decode_many(self, idx: np.ndarray) -> list[str]:
        lut = np.array(list(self.symbols))
        return ["".join(row) for row in lut[np.asarray(idx)]]


def read_sequences(path: str | Path, vocab: Vocabulary | None = None) -> list[str]:
    seqs = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if vocab is not None:
        for s in seqs:
            vocab.encode(s)
    return seqs


def write_sequences(path: str | Path, seqs: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{s}\n" for s in seqs))


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Minimal number of insertions, deletions and substitutions turning ``a`` into ``b``."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _levenshtein_one_to_many(a: np.ndarray, others: np.ndarray) -> np.ndarray:
    # DP rows vectorised across `others`, which share one length.
    n, m = others.shape
    prev = np.broadcast_to(np.arange(m + 1), (n, m + 1)).copy()
    cur = np.empty_like(prev)
    for i in range(1, len(a) + 1):
        cur[:, 0] = i
        sub = prev[:, :-1] + (others != a[i - 1])
        for j in range(1, m + 1):
            cur[:, j] = np.minimum(np.minimum(prev[:, j] + 1, cur[:, j - 1] + 1), sub[:, j - 1])
        prev, cur = cur, prev
    return prev[:, m]


def _as_codes(seqs: Sequence[Sequence]) -> list[np.ndarray]:
    out = []
    for s in seqs:
        if isinstance(s, str):
            out.append(np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32).astype(np.int64))
        else:
            out.append(np.asarray(s, dtype=np.int64))
    return out


def distance_matrix(rows: Sequence[Sequence], cols: Sequence[Sequence]) -> np.ndarray:
    """Levenshtein distance for every (row, col) pair."""
    rc, cc = _as_codes(rows), _as_codes(cols)
    out = np.zeros((len(rc), len(cc)), dtype=np.int64)
    by_len: dict[int, list[int]] = {}
    for j, c in enumerate(cc):
        by_len.setdefault(len(c), []).append(j)
    for length, js in by_len.items():
        block = np.stack([cc[j] for j in js]) if length else np.zeros((len(js), 0), dtype=np.int64)
        for i, r in enumerate(rc):
            out[i, js] = _levenshtein_one_to_many(r, block) if length else len(r)
    return out


def _median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def median_fitness(scores: Sequence[float], f_min: float, f_max: float) -> float:
    """Median of min-max normalised scores; the even-count median averages the central pair."""
    if len(scores) == 0:
        raise ContractError("median_fitness needs at least one score")
    if not f_max > f_min:
        raise ContractError(f"degenerate fitness range [{f_min}, {f_max}]")
    s = (np.asarray(scores, dtype=np.float64) - f_min) / (f_max - f_min)
    return _median(s)


def diversity(seqs: Sequence[Sequence]) -> float:
    """Median Levenshtein distance over all unordered pairs of list positions."""
    if len(seqs) < 2:
        raise ContractError("diversity needs at least two sequences")
    d = distance_matrix(seqs, seqs)
    iu = np.triu_indices(len(seqs), k=1)
    return _median(d[iu])


def novelty(seqs: Sequence[Sequence], train: Sequence[Sequence]) -> float:
    """Median over generated sequences of the distance to the nearest *different* training sequence."""
    if len(train) == 0:
        raise ContractError("novelty needs a non-empty training set")
    d = distance_matrix(seqs, train).astype(np.float64)
    # Identical training members have distance 0 and are excluded.
    d[d == 0] = np.inf
    nearest = d.min(axis=1)
    if np.isinf(nearest).any():
        bad = int(np.argmax(np.isinf(nearest)))
        raise ContractError(f"training set holds only copies of generated sequence {bad}")
    return _median(nearest)


@dataclass(frozen=True)
class MetricsReport:
    median_fitness: float
    diversity: float
    novelty: float
    n_sequences: int
    seed: int

    def __post_init__(self):
        for name in ("median_fitness", "diversity", "novelty"):
            if not math.isfinite(getattr(self, name)):
                raise ContractError(f"{name} is not finite")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_set(
    seqs: Sequence[str], scores: Sequence[float], train: Sequence[str], seed: int, f_min: float = 0.0, f_max: float = 1.0
) -> MetricsReport:
    return MetricsReport(
        median_fitness=median_fitness(scores, f_min, f_max),
        diversity=diversity(seqs),
        novelty=novelty(seqs, train),
        n_sequences=len(seqs),
        seed=seed,
    )
