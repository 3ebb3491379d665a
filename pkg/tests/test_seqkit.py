import itertools
import statistics
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fitflow.errors import ContractError, VocabularyError
from fitflow.seqkit import (
    MetricsReport,
    Vocabulary,
    distance_matrix,
    diversity,
    levenshtein,
    median_fitness,
    novelty,
    read_sequences,
    write_sequences,
)


def lev_recursive(a, b):
    """Textbook recursive definition; independent of the DP implementation."""

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def rand_seqs(rng, n, length, alphabet="ACGT"):
    return ["".join(rng.choice(list(alphabet), size=length)) for _ in range(n)]


def test_levenshtein_examples():
    assert levenshtein("AAA", "AAA") == 0
    assert levenshtein("AAA", "AAB") == 1
    assert lev_recursive("ABCD", "ACBD") == 2
    assert levenshtein("ABCD", "ACBD") == 2
    assert levenshtein("", "ABC") == 3
    assert levenshtein("kitten", "sitting") == 3


words = st.text(alphabet="ACGT", max_size=8)


@settings(max_examples=1000, deadline=None)
@given(words, words, words)
def test_levenshtein_metric_axioms(a, b, c):
    dab = levenshtein(a, b)
    assert (dab == 0) == (a == b)
    assert dab == levenshtein(b, a)
    assert levenshtein(a, c) <= dab + levenshtein(b, c)


@settings(max_examples=200, deadline=None)
@given(words, st.lists(words, min_size=1, max_size=6))
def test_distance_matrix_matches_recursive(a, others):
    d = distance_matrix([a], others)
    assert d[0].tolist() == [lev_recursive(a, o) for o in others]


def test_median_fitness_examples():
    assert median_fitness([3.0], 3.0, 7.0) == 0.0
    assert median_fitness([1.0, 0.0], 0.0, 1.0) == 0.5
    assert median_fitness([0.2, 0.6, 0.4], 0.0, 1.0) == pytest.approx(sorted([0.2, 0.6, 0.4])[1], abs=0)
    with pytest.raises(ContractError):
        median_fitness([1.0], 2.0, 2.0)
    with pytest.raises(ContractError):
        median_fitness([], 0.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=9), st.integers(0, 8), st.floats(0, 3))
def test_median_fitness_monotone_and_permutation_invariant(scores, which, bump):
    base = median_fitness(scores, -5.0, 5.0)
    perm = list(reversed(scores))
    assert median_fitness(perm, -5.0, 5.0) == pytest.approx(base, abs=1e-12)
    raised = list(scores)
    raised[which % len(scores)] += bump
    assert median_fitness(raised, -5.0, 5.0) >= base - 1e-12


def test_diversity_examples():
    assert diversity(["ACGTAC"] * 128) == 0.0
    assert diversity(["AA", "AB"]) == 1.0
    with pytest.raises(ContractError):
        diversity(["A"])


@pytest.mark.parametrize("seed", range(10))
def test_diversity_matches_exhaustive_pairs(seed):
    rng = np.random.default_rng(seed)
    seqs = rand_seqs(rng, int(rng.integers(5, 11)), 6)
    expected = statistics.median(lev_recursive(a, b) for a, b in itertools.combinations(seqs, 2))
    assert diversity(seqs) == expected
    assert diversity(list(reversed(seqs))) == expected


def test_novelty_examples():
    train = ["AAAA", "CCCC", "GGGG"]
    # each member of train: nearest *other* training member is 4 away
    assert novelty(train, train) == 4.0
    gen = ["AAAC", "CCCA", "GGGA"]
    assert novelty(gen, train) == 1.0
    with pytest.raises(ContractError):
        novelty(["AAAA"], ["AAAA", "AAAA"])
    with pytest.raises(ContractError):
        novelty(["AAAA"], [])


@pytest.mark.parametrize("seed", range(10))
def test_novelty_matches_double_loop(seed):
    rng = np.random.default_rng(100 + seed)
    gen = rand_seqs(rng, 5, 5, "AB")
    train = rand_seqs(rng, 10, 5, "AB")
    mins = []
    for x in gen:
        mins.append(min(lev_recursive(x, t) for t in train if t != x))
    assert novelty(gen, train) == statistics.median(mins)
    assert novelty(list(reversed(gen)), train) == statistics.median(mins)


def test_unequal_lengths_supported():
    assert distance_matrix(["ACG"], ["A", "ACGT", "ACG"]).tolist() == [[2, 1, 0]]


def test_vocabulary_round_trip_and_errors(tmp_path):
    v = Vocabulary("ACGT")
    assert v.decode(v.encode("GATTACA")) == "GATTACA"
    with pytest.raises(VocabularyError):
        v.encode("ACGU")
    with pytest.raises(ContractError):
        Vocabulary("A")
    with pytest.raises(ContractError):
        Vocabulary("AA")
    p = tmp_path / "s.txt"
    write_sequences(p, ["ACGT", "TTTT"])
    assert read_sequences(p, v) == ["ACGT", "TTTT"]


def test_metrics_report_finite():
    with pytest.raises(ContractError):
        MetricsReport(float("nan"), 0.0, 0.0, 2, 0)
