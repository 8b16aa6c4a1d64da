import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gap_prune.core import Rng
from gap_prune.pruning import (align_gap, align_shifted, gather, permute_by_score, retained_count,
                               score_cls_visual, score_random, score_text_visual, select_indices,
                               select_spatial, topk_select)
from gap_prune.rope import ConfigError, sequential_ids


def brute_topk(scores, k):
    """Sort (score desc, index asc) pairs, keep k, return ascending indices."""
    pairs = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(pairs[:k])


def direct_cls(q, keys, d_k):
    logits = [sum(qi * ki for qi, ki in zip(q, row)) / math.sqrt(d_k) for row in keys]
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    return [v / sum(e) for v in e]


def test_retained_count_examples():
    assert retained_count(576, 0.5) == 288
    assert retained_count(5, 1.0) == 5
    assert retained_count(10, 0.05) == 1
    with pytest.raises(ConfigError):
        retained_count(10, 0.0)
    with pytest.raises(ConfigError):
        retained_count(10, 1.5)


def test_retained_count_exact_rational():
    for n in range(1, 65):
        for tenths in range(1, 11):
            expected = max(1, (n * Fraction(tenths, 10)).__floor__())
            assert retained_count(n, tenths / 10) == expected


def test_topk_examples():
    assert topk_select([4, 2, 1, 5, 3], 2).tolist() == [0, 3]
    assert topk_select([1.0, 0.5, 2.0], 3).tolist() == [0, 1, 2]
    assert topk_select([7, 7, 7], 2).tolist() == [0, 1]
    with pytest.raises(ValueError):
        topk_select([1, 2], 3)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.data())
def test_topk_matches_brute_force_with_ties(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    assert topk_select(scores, k).tolist() == brute_topk(scores, k)


def test_gather():
    v = np.arange(10.0).reshape(5, 2)
    assert np.array_equal(gather(v, range(5)), v)
    assert np.array_equal(gather(v, [2, 3, 4]), v[2:])
    with pytest.raises(IndexError):
        gather(v, [5])
    rng = Rng(4)
    m = rng.normal(24).reshape(8, 3)
    idx = [1, 4, 6]
    assert np.array_equal(gather(m, idx), np.array([m[i].copy() for i in idx]))


def test_score_cls_visual_geometry():
    keys = np.eye(4) * 2.0
    q = np.array([0.0, 0.0, 3.0, 0.0])
    s = score_cls_visual(q, keys, 4)
    assert np.argmax(s) == 2 and np.sum(s == s.max()) == 1
    same = score_cls_visual(np.array([1.0, -2.0]), np.tile([0.5, 0.5], (5, 1)), 2)
    np.testing.assert_allclose(same, 0.2, atol=1e-15)


def test_score_cls_visual_direct_oracle():
    rng = Rng(10)
    q, keys = rng.normal(6), rng.normal(30).reshape(5, 6)
    s = score_cls_visual(q, keys, 6)
    np.testing.assert_allclose(s, direct_cls(q.tolist(), keys.tolist(), 6), atol=1e-12)
    assert abs(s.sum() - 1) < 1e-12


def test_score_text_visual_single_and_doubled():
    rng = Rng(12)
    q, keys = rng.normal(6), rng.normal(42).reshape(7, 6)
    single = score_text_visual(q[None], keys, 6)
    np.testing.assert_allclose(single, score_cls_visual(q, keys, 6), atol=1e-15)
    np.testing.assert_allclose(score_text_visual(np.vstack([q, q]), keys, 6), 2 * single, atol=1e-15)
    with pytest.raises(ValueError):
        score_text_visual(np.zeros((0, 6)), keys, 6)


def test_score_text_visual_direct_oracle():
    rng = Rng(13)
    qs, keys = rng.normal(18).reshape(3, 6), rng.normal(30).reshape(5, 6)
    expected = np.sum([direct_cls(q, keys.tolist(), 6) for q in qs.tolist()], axis=0)
    s = score_text_visual(qs, keys, 6)
    np.testing.assert_allclose(s, expected, atol=1e-12)
    assert abs(s.sum() - 3) < 1e-10


def test_score_random():
    assert np.array_equal(score_random(10, Rng(7)), score_random(10, Rng(7)))
    one = score_random(1, Rng(8))
    assert one.shape == (1,) and 0 <= one[0] < 1
    assert abs(score_random(100_000, Rng(42)).mean() - 0.5) < 0.01


def test_select_spatial_examples():
    assert select_spatial(8, 0.5).tolist() == [0, 2, 4, 6]
    assert select_spatial(5, 1.0).tolist() == [0, 1, 2, 3, 4]
    assert select_spatial(6, 1 / 3).tolist() == [0, 3]


def even_spacing_oracle(n, ratio):
    k = retained_count(n, ratio)
    r = Fraction(ratio).limit_denominator(1000)
    return [math.floor(m / r) for m in range(k)]


@pytest.mark.parametrize("n", [1, 7, 16, 33, 64])
@pytest.mark.parametrize("tenths", range(1, 11))
def test_select_spatial_even_spacing(n, tenths):
    ratio = tenths / 10
    idx = select_spatial(n, ratio).tolist()
    assert idx == even_spacing_oracle(n, ratio)
    assert all(0 <= i < n for i in idx)
    gaps = np.diff(idx)
    if gaps.size:
        assert gaps.min() >= 1 and gaps.max() - gaps.min() <= 1


def test_align_modes():
    assert align_gap([2, 3, 4], 0).tolist() == [2, 3, 4]
    assert align_gap([0, 4], 10).tolist() == [10, 14]
    assert align_gap(range(5), 0).tolist() == sequential_ids(0, 5).tolist()
    assert align_shifted([2, 3, 4], 0).tolist() == [0, 1, 2]
    assert align_shifted([0, 4], 10).tolist() == [10, 11]
    assert align_shifted(range(6), 3).tolist() == align_gap(range(6), 3).tolist()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=2, max_size=12, unique=True), st.integers(0, 20))
def test_gap_preserves_gaps_shifted_compresses(raw, base):
    idx = sorted(raw)
    g, s = align_gap(idx, base), align_shifted(idx, base)
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            assert g[b] - g[a] == idx[b] - idx[a]
            assert s[b] - s[a] == b - a


def test_permute_by_score():
    v = np.arange(6.0).reshape(3, 2)
    out, ids, order = permute_by_score(v, [1, 3, 2])
    assert order.tolist() == [1, 2, 0]
    assert ids.tolist() == [0, 1, 2]
    assert np.array_equal(out, v[[1, 2, 0]])
    same, _, order = permute_by_score(v, [5, 5, 5])
    assert order.tolist() == [0, 1, 2] and np.array_equal(same, v)
    m = Rng(2).normal(20).reshape(10, 2)
    out, _, order = permute_by_score(m, Rng(3).uniform(10))
    restored = np.empty_like(out)
    restored[order] = out
    assert np.array_equal(restored, m)


def test_select_indices_dispatch():
    scores = Rng(1).uniform(16)
    for strategy in ("cls_visual", "text_visual", "random"):
        idx = select_indices(strategy, 0.5, 16, scores)
        assert idx.tolist() == brute_topk(scores.tolist(), 8)
    assert select_indices("spatial", 0.5, 16).tolist() == list(range(0, 16, 2))
    assert select_indices("none", 0.3, 4).tolist() == [0, 1, 2, 3]
    with pytest.raises(ConfigError):
        select_indices("bogus", 0.5, 4, scores)


def test_ratio_one_gather_is_identity():
    v = Rng(6).normal(32).reshape(16, 2)
    s = Rng(7).uniform(16)
    assert np.array_equal(gather(v, topk_select(s, retained_count(16, 1.0))), v)
