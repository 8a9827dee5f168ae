import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnvar import losses, metrics
from attnvar.autodiff import Tensor

tokens = st.lists(st.integers(0, 5), max_size=12)


def brute_rouge_n(cand, ref, n):
    cg = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
    rg = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
    pool = list(rg)
    hit = 0
    for g in cg:
        if g in pool:
            pool.remove(g)
            hit += 1
    return hit, len(cg), len(rg)


def brute_lcs(a, b):
    # longest common subsequence by enumerating subsequences of the shorter side
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            sub = [short[i] for i in idx]
            it = iter(long_)
            if all(any(x == y for y in it) for x in sub):
                return k
    return 0


def test_rouge_examples():
    s = "the cat sat".split()
    assert metrics.rouge_n(s, s, 1) == metrics.RougeScore(1.0, 1.0, 1.0)
    assert metrics.rouge_n(s, "a b c".split(), 2).f1 == 0.0
    r = metrics.rouge_n(s, "the cat ran".split(), 1)
    assert r.precision == r.recall == pytest.approx(2 / 3) and r.f1 == pytest.approx(2 / 3)


def test_rouge_l_examples():
    assert metrics.rouge_l(list("abcd"), list("abcd")).f1 == 1.0
    r = metrics.rouge_l(list("abcd"), list("acbd"))
    assert (r.precision, r.recall) == (0.75, 0.75) and r.f1 == pytest.approx(0.75)
    assert metrics.rouge_l([], list("abc")).f1 == 0.0


def test_rouge_n_rejects_bad_n():
    with pytest.raises(ValueError):
        metrics.rouge_n([1], [1], 0)


@pytest.mark.parametrize("n", [1, 2])
def test_rouge_n_matches_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(100):
        a = rng.integers(0, 6, size=rng.integers(0, 13)).tolist()
        b = rng.integers(0, 6, size=rng.integers(0, 13)).tolist()
        expected = metrics.RougeScore.from_counts(*brute_rouge_n(a, b, n))
        assert metrics.rouge_n(a, b, n) == expected


def test_rouge_l_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a = rng.integers(0, 5, size=rng.integers(0, 9)).tolist()
        b = rng.integers(0, 5, size=rng.integers(0, 9)).tolist()
        assert metrics.lcs_length(a, b) == brute_lcs(a, b)


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_rouge_swap_symmetry(a, b):
    for fn in (lambda x, y: metrics.rouge_n(x, y, 1), lambda x, y: metrics.rouge_n(x, y, 2), metrics.rouge_l):
        ab, ba = fn(a, b), fn(b, a)
        assert (ab.precision, ab.recall) == (ba.recall, ba.precision)
        assert ab.f1 == pytest.approx(ba.f1)


def test_duplication_examples():
    assert metrics.duplication_rate("a b c d e".split(), 3) == 0.0
    assert metrics.duplication_rate("a b a b a b".split(), 3) == 0.5
    assert metrics.duplication_rate(["a", "b"], 3) == 0.0


@settings(max_examples=100, deadline=None)
@given(tokens, st.integers(1, 4), st.permutations(list(range(6))))
def test_duplication_invariant_under_renaming(seq, n, perm):
    renamed = [perm[t] for t in seq]
    assert metrics.duplication_rate(seq, n) == metrics.duplication_rate(renamed, n)


def test_attention_stats_single_step():
    st_ = metrics.attention_stats([[0.2, 0.5, 0.3]])
    assert (st_.gap == 0).all()


def test_attention_stats_repeated_one_hot():
    st_ = metrics.attention_stats([[1, 0, 0, 0], [1, 0, 0, 0]], gates=np.ones((2, 4)))
    assert st_.accumulated.tolist() == [2, 0, 0, 0]
    assert st_.gap.tolist() == [1, 0, 0, 0]
    assert st_.gate_mean.tolist() == [1, 1]


def test_attention_stats_agree_with_losses():
    rng = np.random.default_rng(2)
    for _ in range(20):
        rows = rng.dirichlet(np.ones(6), size=4) * rng.uniform(0.3, 1, size=(4, 1))
        st_ = metrics.attention_stats(rows)
        tr = losses.DecodeTrace(Tensor(rows))
        expected_local = np.mean(1 / (st_.local_variance + 1e-6))
        assert losses.local_variance_loss(tr).item() == pytest.approx(expected_local, rel=1e-12)
        g = st_.gap
        assert losses.global_variance_loss(tr).item() == pytest.approx(np.mean((g - np.median(g)) ** 2), rel=1e-12)
        np.testing.assert_allclose(st_.accumulated, rows.sum(0), rtol=1e-15)
        assert (g >= 0).all()
