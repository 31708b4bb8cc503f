import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eat.pruning import (
    LayerState,
    PruneSchedule,
    anneal_ratio,
    apply_pruning,
    importance_scores,
    kept_count,
    select_kept,
)
from eat.tensor import Matrix

scores_st = st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=60)


class TestImportance:
    def test_zero_row(self):
        assert importance_scores(np.zeros((1, 4)))[0] == 0.0

    def test_three_four_five(self):
        assert importance_scores(Matrix([[3.0, 4.0]]))[0] == pytest.approx(5.0)

    def test_matches_formula(self, rng):
        h = rng.normal(size=(7, 5))
        ref = [math.sqrt(sum(x * x for x in row)) for row in h.tolist()]
        np.testing.assert_allclose(importance_scores(h), ref, rtol=1e-6)


class TestSelectKept:
    def test_no_pruning_keeps_all(self, rng):
        assert select_kept(rng.random(9), 0.0) == list(range(9))

    def test_t101(self, rng):
        kept = select_kept(rng.random(101), 0.3)
        # CLS + ceil(0.7 * 100)
        assert len(kept) == 71 and kept[0] == 0

    def test_full_pruning_keeps_cls(self, rng):
        assert select_kept(rng.random(12), 1.0) == [0]

    def test_keeps_highest_scores(self):
        scores = [0.0, 5.0, 1.0, 4.0, 2.0, 3.0]
        assert select_kept(scores, 0.4) == [0, 1, 3, 5]

    def test_cls_kept_even_with_lowest_score(self):
        assert 0 in select_kept([-1.0, 3.0, 2.0, 1.0], 0.5)

    def test_ties_prefer_lower_index(self):
        assert select_kept([0.0, 1.0, 1.0, 1.0, 1.0], 0.5) == [0, 1, 2]

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            select_kept([1.0, 2.0], 1.5)

    @settings(max_examples=200, deadline=None)
    @given(scores_st, st.floats(0, 1))
    def test_count_and_order(self, scores, p):
        kept = select_kept(scores, p)
        t = len(scores)
        assert kept[0] == 0
        assert kept == sorted(set(kept))
        assert len(kept) - 1 == min(t - 1, math.ceil(round((1 - p) * (t - 1), 9)))
        dropped = set(range(1, t)) - set(kept)
        if dropped and len(kept) > 1:
            assert min(scores[i] for i in kept[1:]) >= max(scores[i] for i in dropped)

    @settings(max_examples=100, deadline=None)
    @given(scores_st, st.floats(0, 1), st.floats(0.01, 100))
    def test_positive_rescaling_invariant(self, scores, p, c):
        scaled = [s * c for s in scores]
        # rescaling may merge nearly equal scores; compare only when order is unambiguous
        if len(set(scaled)) == len(set(scores)) and np.all(np.argsort(scores, kind="stable") == np.argsort(scaled, kind="stable")):
            assert select_kept(scores, p) == select_kept(scaled, p)

    @settings(max_examples=100, deadline=None)
    @given(scores_st, st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_ratio(self, scores, p, q):
        lo, hi = sorted((p, q))
        assert set(select_kept(scores, hi)) <= set(select_kept(scores, lo))


class TestSchedule:
    sched = PruneSchedule((2, 4), 0.3, 100, 300)

    def test_start_is_zero(self):
        assert anneal_ratio(100, self.sched, 2) == 0.0
        assert anneal_ratio(0, self.sched, 4) == 0.0

    def test_end_is_target(self):
        assert anneal_ratio(300, self.sched, 2) == pytest.approx(0.3)
        assert anneal_ratio(10_000, self.sched, 4) == pytest.approx(0.3)

    def test_midpoint(self):
        assert anneal_ratio(200, self.sched, 2) == pytest.approx(0.15)

    def test_unscheduled_layer(self):
        assert anneal_ratio(250, self.sched, 3) == 0.0

    def test_monotone(self):
        vals = [anneal_ratio(s, self.sched, 2) for s in range(0, 400)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            PruneSchedule((2, 4), 1.0)
        with pytest.raises(ValueError):
            PruneSchedule((4, 2))
        with pytest.raises(ValueError):
            PruneSchedule((2, 4), 0.3, 10, 5)


class TestApplyPruning:
    def test_keep_all_is_identity(self, rng):
        s = LayerState(Matrix(rng.normal(size=(5, 3))))
        out = apply_pruning(s, range(5))
        assert out.kept_original_indices == [0, 1, 2, 3, 4]
        np.testing.assert_array_equal(out.h.data, s.h.data)

    def test_cls_only(self, rng):
        s = LayerState(Matrix(rng.normal(size=(5, 3))))
        out = apply_pruning(s, [0])
        assert out.h.shape == (1, 3) and out.kept_original_indices == [0]

    def test_missing_cls(self, rng):
        with pytest.raises(ValueError):
            apply_pruning(LayerState(Matrix(rng.normal(size=(5, 3)))), [1, 2])

    def test_composition_matches_direct_selection(self, rng):
        for _ in range(50):
            t = int(rng.integers(2, 30))
            h = rng.normal(size=(t, 4))
            s0 = LayerState(Matrix(h))
            first = select_kept(rng.random(t), float(rng.random()))
            s1 = apply_pruning(s0, first)
            second = select_kept(rng.random(s1.t), float(rng.random()))
            s2 = apply_pruning(s1, second)
            direct = [first[i] for i in second]
            assert s2.kept_original_indices == direct
            np.testing.assert_array_equal(s2.h.data, s0.h.data[direct])


def test_scheduled_retention_counts():
    t = 101
    counts = []
    for layer in range(1, 7):
        counts.append(t)
        if layer in (2, 4):
            t = 1 + kept_count(t, 0.3)
    assert counts == [101, 101, 71, 71, 50, 50]
    pct = [round(100 * (c - 1) / 100) for c in counts]
    assert pct == [100, 100, 70, 70, 49, 49]
