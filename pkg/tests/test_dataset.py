import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from htqe.dataset import (ASPECT_MAX, ASPECTS, Corpus, CorpusFormatError, Example, ScoreVector,
                          gen_synthetic, make_batches, parse_tsv, serialize_tsv, split, write_tsv)


def tsv(tmp_path, text):
    path = tmp_path / "c.tsv"
    path.write_text(text, encoding="utf-8")
    return path


def test_parse_line(tmp_path):
    corpus = parse_tsv(tsv(tmp_path, "a b\tc d\t23\t18\t20.5\t11.5\n"))
    ex = corpus[0]
    assert ex.source_tokens == ("a", "b") and ex.target_tokens == ("c", "d")
    assert ex.gold.total() == 73.0


def test_out_of_range_cites_bound(tmp_path):
    with pytest.raises(CorpusFormatError, match=r":1: UT score 36 outside \[0, 35\]"):
        parse_tsv(tsv(tmp_path, "a\tb\t36\t1\t1\t1\n"))


@pytest.mark.parametrize("line, message", [
    ("a\tb\t1\t1\t1\n", "expected 6 tab-separated fields, got 5"),
    ("a\tb\t1\tx\t1\t1\n", "TS score 'x' is not numeric"),
    ("\tb\t1\t1\t1\t1\n", "empty source text"),
    ("a\t \t1\t1\t1\t1\n", "empty target text"),
    ("a\tb\t1\t1\t1\t-0.5\n", "TM score -0.5 outside"),
])
def test_parse_errors_carry_line_numbers(tmp_path, line, message):
    with pytest.raises(CorpusFormatError, match=":2: " + message.replace("[", r"\[")):
        parse_tsv(tsv(tmp_path, "a\tb\t1\t1\t1\t1\n" + line))


def test_score_vector_bounds():
    assert ScoreVector(35, 25, 25, 15).total() == 100
    with pytest.raises(ValueError):
        ScoreVector(0, 26, 0, 0)


def test_examples_need_tokens_and_unique_ids():
    with pytest.raises(ValueError):
        Example((), ("x",), None, "a")
    ex = Example(("a",), ("b",), ScoreVector(1, 1, 1, 1), "same")
    with pytest.raises(ValueError):
        Corpus((ex, ex))


def test_round_trip(tmp_path):
    corpus = gen_synthetic(25, 3)
    path = tmp_path / "rt.tsv"
    write_tsv(corpus, path)
    again = parse_tsv(path, id_prefix="x")
    assert serialize_tsv(again) == serialize_tsv(corpus)
    for a, b in zip(corpus, again):
        assert (a.source_tokens, a.target_tokens, a.gold) == (b.source_tokens, b.target_tokens, b.gold)


def test_split_sizes_3000_and_529():
    corpus = gen_synthetic(3529, 0)
    train, test = split(corpus, 3000, seed=11)
    assert (len(train), len(test)) == (3000, 529)
    ids = Counter(ex.id for ex in train) + Counter(ex.id for ex in test)
    assert ids == Counter(ex.id for ex in corpus)


def test_split_is_reproducible_and_seed_dependent():
    corpus = gen_synthetic(10, 0)
    a1, _ = split(corpus, 6, seed=1)
    a2, _ = split(corpus, 6, seed=1)
    b, _ = split(corpus, 6, seed=2)
    assert [e.id for e in a1] == [e.id for e in a2]
    assert [e.id for e in a1] != [e.id for e in b]
    with pytest.raises(ValueError):
        split(corpus, 10, seed=1)
    with pytest.raises(ValueError):
        split(corpus, 0, seed=1)


def test_split_shuffle_covers_all_orders_uniformly():
    # Oracle: enumerate the 24 orders of 4 items; a seeded shuffle should hit
    # every one of them with roughly equal frequency across seeds.
    corpus = gen_synthetic(4, 0)
    all_orders = set(itertools.permutations(range(4)))
    index = {ex.id: i for i, ex in enumerate(corpus)}
    counts = Counter()
    trials = 4800
    for seed in range(trials):
        train, test = split(corpus, 3, seed)
        counts[tuple(index[e.id] for e in (*train, *test))] += 1
    assert set(counts) == all_orders
    expected = trials / 24
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 49.7  # 99.9th percentile of chi-square with 23 dof
    # two different seeds coincide with probability 1/24 under uniformity
    same = sum(c * (c - 1) for c in counts.values()) / (trials * (trials - 1))
    assert abs(same - 1 / 24) < 0.01


def test_batches_sizes_and_masks():
    corpus = gen_synthetic(10, 2)
    batches = make_batches(corpus, 4, seed=0, shuffle=True)
    assert [len(b) for b in batches] == [4, 4, 2]
    seen = [ex.id for b in batches for ex in b.examples]
    assert sorted(seen) == sorted(ex.id for ex in corpus)
    for b in batches:
        for ex, src, mask in zip(b.examples, b.source, b.source_mask):
            assert mask.sum() == len(ex.source_tokens)
            assert src[:len(ex.source_tokens)] == list(ex.source_tokens)
        for ex, mask in zip(b.examples, b.target_mask):
            assert mask.sum() == len(ex.target_tokens)
        np.testing.assert_array_equal(b.gold, np.array([ex.gold.as_array() for ex in b.examples]))
    with pytest.raises(ValueError):
        make_batches(Corpus(()), 4)
    with pytest.raises(ValueError):
        make_batches(corpus, 0)


def test_batches_without_shuffle_keep_order():
    corpus = gen_synthetic(5, 2)
    batches = make_batches(corpus, 2, shuffle=False)
    assert [ex.id for b in batches for ex in b.examples] == [ex.id for ex in corpus]


def test_synthetic_is_deterministic_and_in_bounds():
    a, b = gen_synthetic(32, 7), gen_synthetic(32, 7)
    assert serialize_tsv(a) == serialize_tsv(b)
    assert serialize_tsv(a) != serialize_tsv(gen_synthetic(32, 8))
    for ex in a:
        for aspect in ASPECTS:
            assert 0 <= getattr(ex.gold, aspect) <= ASPECT_MAX[aspect]


def test_synthetic_scores_span_half_of_each_range():
    gold = gen_synthetic(400, 0).gold_matrix()
    for j, aspect in enumerate(ASPECTS):
        spread = gold[:, j].max() - gold[:, j].min()
        assert spread >= 0.5 * ASPECT_MAX[aspect], aspect


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 1000))
def test_batching_preserves_content(n, batch_size, seed):
    corpus = gen_synthetic(n, seed)
    by_id = {ex.id: ex for ex in corpus}
    count = 0
    for b in make_batches(corpus, batch_size, seed=seed):
        for ex, src, tgt in zip(b.examples, b.source, b.target):
            assert by_id[ex.id] is ex
            assert tuple(src[:len(ex.source_tokens)]) == ex.source_tokens
            assert tuple(tgt[:len(ex.target_tokens)]) == ex.target_tokens
            count += 1
    assert count == n
