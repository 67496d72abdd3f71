import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastiserve.pipeline import fit_scorer, sample_tasks
from elastiserve.promptkit import (
    HeuristicScorer,
    LearnedScorer,
    UniformScorer,
    compress,
    score_tokens,
    scorer_from_dict,
    select_positions,
    target_length,
)
from elastiserve.task import BOS, QUERY, TaskVocab, gen_task


@pytest.fixture(scope="module")
def learned():
    return fit_scorer(sample_tasks(10, 300))


def test_uniform_scores_equal():
    s = score_tokens(UniformScorer(), [1, 5, 9, 2, 5])
    assert len(s) == 5 and np.all(s == s[0])


def test_learned_scorer_ranks_queried_pair_above_median_distractor(learned):
    vocab = TaskVocab()
    tasks = sample_tasks(123, 200)
    hits = 0
    for t in tasks:
        s = score_tokens(learned, t.prompt)
        pair = [i for i, r in enumerate(t.retain) if r and t.prompt[i] not in vocab.protected]
        distract = [i for i, r in enumerate(t.retain) if not r]
        if not distract:
            hits += 1
            continue
        hits += s[pair].min() > np.median(s[distract])
    assert hits / len(tasks) >= 0.95


def test_scores_deterministic(learned):
    t = gen_task(1, 4, 2)
    assert np.array_equal(score_tokens(learned, t.prompt), score_tokens(learned, t.prompt))


def test_scorer_round_trip(learned):
    t = gen_task(2, 5, 3)
    for sc in (learned, UniformScorer(0.3), HeuristicScorer()):
        back = scorer_from_dict(sc.to_dict())
        assert np.array_equal(score_tokens(back, t.prompt), score_tokens(sc, t.prompt))


def test_untrained_scorer_raises():
    with pytest.raises(RuntimeError):
        LearnedScorer().score([1, 2])


def test_level_one_is_identity():
    p = [1, 7, 8, 9, 2, 7]
    assert compress(p, np.random.default_rng(0).random(6), 1.0) == p


def test_top_half_by_score():
    # positions 0 and 2 are the top two; in 1-based terms "tokens 1 and 3"
    assert select_positions([11, 12, 13, 14], [0.9, 0.1, 0.8, 0.2], 0.5) == [0, 2]
    assert compress([11, 12, 13, 14], [0.9, 0.1, 0.8, 0.2], 0.5) == [11, 13]


def test_ties_keep_first_half():
    assert compress([5, 6, 7, 8, 9, 10], [0.5] * 6, 0.5) == [5, 6, 7]


def test_target_length_floor_and_minimum():
    assert target_length(10, 0.25) == 2
    assert target_length(3, 0.1) == 1
    assert target_length(10, 0.3) == 3
    with pytest.raises(ValueError):
        target_length(5, 0.0)


def test_protected_tokens_always_kept():
    p = [BOS, 20, 21, 22, 23, QUERY, 20]
    scores = [0.0, 0.9, 0.8, 0.7, 0.6, 0.0, 0.5]
    out = compress(p, scores, 0.3, frozenset({BOS, QUERY}))
    assert BOS in out and QUERY in out


def test_length_mismatch():
    with pytest.raises(ValueError):
        compress([1, 2, 3], [0.1, 0.2], 0.5)


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


prompts = st.lists(st.integers(0, 30), min_size=1, max_size=40)


@settings(max_examples=150, deadline=None)
@given(p=prompts, data=st.data(), level=st.floats(0.01, 1.0))
def test_compress_is_subsequence(p, data, level):
    scores = data.draw(st.lists(st.floats(0, 1), min_size=len(p), max_size=len(p)))
    out = compress(p, scores, level, frozenset({1, 2}))
    assert _is_subsequence(out, p)
    assert len(out) >= min(len(p), target_length(len(p), level))


@settings(max_examples=150, deadline=None)
@given(p=prompts, data=st.data(), a=st.floats(0.01, 1.0), b=st.floats(0.01, 1.0))
def test_monotone_and_nested(p, data, a, b):
    lo, hi = sorted((a, b))
    scores = data.draw(st.lists(st.floats(0, 1), min_size=len(p), max_size=len(p)))
    prot = frozenset({1, 2})
    small = set(select_positions(p, scores, lo, prot))
    big = set(select_positions(p, scores, hi, prot))
    assert len(small) <= len(big)
    assert small <= big
