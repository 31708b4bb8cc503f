import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eat import tensor as tn
from eat.attention import (
    SparseMask,
    attend,
    build_sparse_mask,
    count_allowed_pairs,
    dense_attention_reference,
    init_attention,
    sparse_pair_count,
)
from eat.tensor import DimensionError, Matrix


def enumerate_pairs(t, k):
    """Brute-force allowed set: CLS row/column plus the +-k/2 window."""
    return {(i, j) for i in range(t) for j in range(t) if i == 0 or j == 0 or abs(i - j) <= k // 2}


class TestMask:
    def test_single_token(self):
        m = build_sparse_mask(1, 4)
        assert m.allowed.shape == (1, 1) and m.allowed.all()

    def test_t5_k2_row3(self):
        m = build_sparse_mask(5, 2)
        assert set(np.flatnonzero(m.allowed[3])) == {0, 2, 3, 4}

    def test_wide_window_is_dense(self):
        for t in range(1, 12):
            assert build_sparse_mask(t, 2 * (t - 1) + 2).allowed.all()
            assert build_sparse_mask(t, 2 * max(t - 1, 0)).allowed.all()

    def test_odd_window_rejected(self):
        with pytest.raises(ValueError):
            build_sparse_mask(5, 3)

    def test_cls_must_be_zero(self):
        with pytest.raises(ValueError):
            build_sparse_mask(5, 2, cls_index=1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 20).map(lambda x: 2 * x))
    def test_invariants(self, t, k):
        m = build_sparse_mask(t, k)
        a = m.allowed
        assert a[0].all() and a[:, 0].all() and np.diag(a).all()
        assert set(zip(*np.nonzero(a))) == enumerate_pairs(t, k)
        # window symmetry
        np.testing.assert_array_equal(a, a.T)
        assert count_allowed_pairs(m) <= t * (k + 2) + 2 * t

    def test_packed_rows_round_trip(self):
        m = build_sparse_mask(13, 4)
        np.testing.assert_array_equal(np.unpackbits(m.packed(), axis=1)[:, :13].astype(bool), m.allowed)


class TestPairCount:
    def test_single(self):
        assert count_allowed_pairs(build_sparse_mask(1, 2)) == 1

    def test_t5_k2(self):
        # enumeration: rows hold 5, 3, 4, 4, 3 allowed entries
        assert len(enumerate_pairs(5, 2)) == 19
        assert count_allowed_pairs(build_sparse_mask(5, 2)) == 19

    def test_dense(self):
        for t in (1, 4, 9):
            assert count_allowed_pairs(build_sparse_mask(t, None)) == t * t

    @pytest.mark.parametrize("k", [0, 2, 4, 8, 32])
    def test_closed_form_matches_enumeration(self, k):
        for t in range(1, 70):
            assert sparse_pair_count(t, k) == len(enumerate_pairs(t, k))
        assert sparse_pair_count(10, None) == 100

    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_increment_bounded(self, k):
        for t in range(k + 3, 200):
            step = count_allowed_pairs(build_sparse_mask(t, k)) - count_allowed_pairs(build_sparse_mask(t - 1, k))
            assert step <= k + 3


@pytest.fixture
def params(rng):
    return init_attention(rng, 16, 4, std=0.4)


class TestAttend:
    def test_dense_matches_reference(self, rng, params):
        h = rng.normal(size=(9, 16))
        got = attend(Matrix(h), params, build_sparse_mask(9, None)).data
        np.testing.assert_allclose(got, dense_attention_reference(h, params), atol=1e-5)

    def test_sparse_matches_masked_reference(self, rng, params):
        for _ in range(20):
            t = int(rng.integers(1, 33))
            k = int(rng.choice([2, 4, 8]))
            h = rng.normal(size=(t, 16))
            mask = build_sparse_mask(t, k)
            got = attend(Matrix(h), params, mask).data
            assert np.max(np.abs(got - dense_attention_reference(h, params, mask.allowed))) < 1e-5

    def test_single_token_is_value_projection(self, rng, params):
        h = rng.normal(size=(1, 16))
        got = attend(Matrix(h), params, build_sparse_mask(1, 2)).data
        v = h @ params.w_v.data + params.b_v.data
        np.testing.assert_allclose(got, v @ params.w_o.data + params.b_o.data, atol=1e-5)

    def test_permutation_equivariance(self, rng, params):
        t = 8
        h = rng.normal(size=(t, 16))
        perm = np.concatenate([[0], 1 + rng.permutation(t - 1)])
        allowed = rng.random((t, t)) < 0.5
        allowed[0, :] = allowed[:, 0] = True
        np.fill_diagonal(allowed, True)
        allowed_p = allowed[np.ix_(perm, perm)]
        out = attend(Matrix(h), params, SparseMask(t, None, 0, allowed)).data
        out_p = attend(Matrix(h[perm]), params, SparseMask(t, None, 0, allowed_p)).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-5)

    def test_shape_mismatch(self, rng, params):
        with pytest.raises(DimensionError):
            attend(Matrix(rng.normal(size=(4, 16))), params, build_sparse_mask(5, 2))
        with pytest.raises(DimensionError):
            attend(Matrix(rng.normal(size=(5, 8))), params, build_sparse_mask(5, 2))

    def test_head_count_must_divide_width(self, rng):
        with pytest.raises(DimensionError):
            init_attention(rng, 10, 4)

    def test_gradient_flows_through_mask(self, rng):
        with tn.precision(np.float64):
            p = init_attention(rng, 8, 2, std=0.5)
            h = tn.parameter(rng.normal(size=(6, 8)))
            loss = tn.sum_all(tn.square(attend(h, p, build_sparse_mask(6, 2))))
            tn.backward(loss)
        assert h.grad is not None and np.all(np.isfinite(h.grad))
        assert all(m.grad is not None for m in p.matrices().values())
