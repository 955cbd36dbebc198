import numpy as np
import pytest

from meprop import (
    DimensionMismatch,
    FlopCounter,
    IndexSet,
    densify,
    masked_transpose_matvec,
    matvec,
    sparse_outer,
    top_k_indices,
    top_k_mask,
)


def matvec_oracle(W, x):
    """Triple-checked scalar loop."""
    n, m = W.shape
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += W[i][j] * x[j]
        out[i] = acc
    return out


class TestMatvec:
    def test_identity(self):
        assert np.array_equal(matvec(np.eye(2), np.array([3.0, 4.0])), [3.0, 4.0])

    def test_hand_sum(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matvec(W, np.array([1.0, 1.0])), [3.0, 7.0])

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(7)
        W = rng.standard_normal((5, 7))
        x = rng.standard_normal(7)
        assert np.allclose(matvec(W, x), matvec_oracle(W, x), atol=1e-12)

    def test_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionMismatch) as err:
            matvec(np.ones((3, 4)), np.ones(5))
        assert "(3, 4)" in str(err.value)
        assert "(5,)" in str(err.value)

    def test_counts_flops(self):
        flops = FlopCounter()
        matvec(np.ones((3, 4)), np.ones(4), flops)
        assert flops.multiply_adds == 12


class TestTopK:
    def test_paper_example(self):
        v = np.array([1.0, 2.0, 3.0, -4.0])
        assert list(top_k_indices(v, 2)) == [2, 3]

    def test_k_equals_length(self):
        v = np.array([1.0, 2.0, 3.0, -4.0])
        assert list(top_k_indices(v, 4)) == [0, 1, 2, 3]

    def test_k_exceeds_length(self):
        assert list(top_k_indices(np.array([1.0, 2.0]), 99)) == [0, 1]

    def test_tie_breaks_to_lower_index(self):
        assert list(top_k_indices(np.array([5.0, -5.0, 0.0]), 1)) == [0]
        assert list(top_k_indices(np.array([-2.0, 2.0, 2.0]), 2)) == [0, 1]

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError):
            top_k_indices(np.array([1.0]), 0)

    def test_selection_properties_random(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(1, 40))
            v = rng.standard_normal(n)
            if rng.random() < 0.3:
                # force ties
                v = np.round(v)
            k = int(rng.integers(1, n + 1))
            sel = top_k_indices(v, k)
            assert len(sel) == min(k, n)
            idx = sel.indices
            assert np.all(np.diff(idx) > 0)
            included = np.abs(v[idx])
            excluded = np.delete(np.abs(v), idx)
            if excluded.size and included.size:
                assert excluded.max() <= included.min() + 1e-15

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            v = rng.standard_normal(n)
            k = int(rng.integers(1, n + 1))
            # stable sort on (-|v|, index) is the definition
            order = sorted(range(n), key=lambda i: (-abs(v[i]), i))
            expect = sorted(order[:k])
            assert list(top_k_indices(v, k)) == expect


class TestTopKMask:
    def test_paper_example(self):
        v = np.array([1.0, 2.0, 3.0, -4.0])
        assert np.array_equal(top_k_mask(v, 2), [0.0, 0.0, 3.0, -4.0])

    def test_zero_vector(self):
        assert np.array_equal(top_k_mask(np.zeros(3), 2), np.zeros(3))

    def test_full_k_is_identity(self):
        rng = np.random.default_rng(5)
        v = rng.standard_normal(17)
        assert np.array_equal(top_k_mask(v, 17), v)


class TestSparseOuter:
    def test_masked_rows(self):
        sp = np.array([0.1, 0.5])
        x = np.array([1.0, 1.0])
        g = sparse_outer(sp, x, IndexSet([1], 2))
        dense = sp[:, None] * x[None, :]
        dense[0] = 0.0
        assert np.array_equal(densify(g), dense)

    def test_full_set_equals_outer(self):
        rng = np.random.default_rng(2)
        sp = rng.standard_normal(6)
        x = rng.standard_normal(4)
        g = sparse_outer(sp, x, IndexSet.full(6))
        assert np.array_equal(densify(g), sp[:, None] * x[None, :])

    def test_one_by_one(self):
        g = sparse_outer(np.array([2.0]), np.array([3.0]), IndexSet([0], 1))
        assert np.array_equal(densify(g), [[6.0]])

    def test_random_against_dense_then_mask(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n, m = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            sp = rng.standard_normal(n)
            x = rng.standard_normal(m)
            k = int(rng.integers(1, n + 1))
            S = top_k_indices(sp, k)
            dense = sp[:, None] * x[None, :]
            mask = np.zeros(n, dtype=bool)
            mask[S.indices] = True
            dense[~mask] = 0.0
            assert np.array_equal(densify(sparse_outer(sp, x, S)), dense)

    def test_universe_mismatch(self):
        with pytest.raises(DimensionMismatch):
            sparse_outer(np.ones(3), np.ones(2), IndexSet([0], 4))

    def test_counts_flops(self):
        flops = FlopCounter()
        sparse_outer(np.ones(5), np.ones(7), IndexSet([1, 3], 5), flops)
        assert flops.multiply_adds == 2 * 7


class TestMaskedTransposeMatvec:
    def test_hand_case(self):
        W = np.eye(2)
        out = masked_transpose_matvec(W, np.array([0.1, 0.5]), IndexSet([1], 2))
        assert np.allclose(out, [0.0, 0.5], atol=1e-15)

    def test_full_set_matches_dense(self):
        rng = np.random.default_rng(4)
        W = rng.standard_normal((9, 5))
        sp = rng.standard_normal(9)
        full = masked_transpose_matvec(W, sp, IndexSet.full(9))
        assert np.allclose(full, W.T @ sp, atol=1e-12)

    def test_zero_gradient(self):
        W = np.random.default_rng(1).standard_normal((4, 3))
        out = masked_transpose_matvec(W, np.zeros(4), IndexSet([0, 2], 4))
        assert np.array_equal(out, np.zeros(3))

    def test_random_against_masked_dense(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n, m = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            W = rng.standard_normal((n, m))
            sp = rng.standard_normal(n)
            k = int(rng.integers(1, n + 1))
            S = top_k_indices(sp, k)
            masked = np.zeros(n)
            masked[S.indices] = sp[S.indices]
            assert np.allclose(
                masked_transpose_matvec(W, sp, S), W.T @ masked, atol=1e-12
            )

    def test_counts_flops(self):
        flops = FlopCounter()
        masked_transpose_matvec(np.ones((5, 7)), np.ones(5),
                                IndexSet([0, 4], 5), flops)
        assert flops.multiply_adds == 2 * 7


class TestDensify:
    def test_scatter(self):
        g = sparse_outer(np.array([0.1, 0.5]), np.array([1.0, 1.0]),
                         IndexSet([1], 2))
        assert np.array_equal(densify(g), [[0.0, 0.0], [0.5, 0.5]])

    def test_empty_index_set(self):
        from meprop import SparseRowGradient
        g = SparseRowGradient(IndexSet([], 3), np.zeros((0, 2)))
        assert np.array_equal(densify(g), np.zeros((3, 2)))

    def test_full_index_set_is_block(self):
        rng = np.random.default_rng(6)
        sp = rng.standard_normal(4)
        x = rng.standard_normal(3)
        g = sparse_outer(sp, x, IndexSet.full(4))
        assert np.array_equal(densify(g), g.block)


class TestFlopCounter:
    def test_meprop_backward_is_exact_fraction_of_full(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            n, m = int(rng.integers(2, 40)), int(rng.integers(1, 40))
            k = int(rng.integers(1, n + 1))
            sp = rng.standard_normal(n)
            x = rng.standard_normal(m)
            W = rng.standard_normal((n, m))
            S = top_k_indices(sp, k)
            full = FlopCounter()
            sp[:, None] * x[None, :]
            full.add(n * m)  # dense outer
            full.add(n * m)  # dense transpose matvec
            sparse = FlopCounter()
            sparse_outer(sp, x, S, sparse)
            masked_transpose_matvec(W, sp, S, sparse)
            # flops_meprop / flops_full == k / n, exactly, in integers
            assert sparse.multiply_adds * n == full.multiply_adds * k

    def test_monotone_and_resettable(self):
        flops = FlopCounter()
        flops.add(5)
        flops.add(7)
        assert flops.multiply_adds == 12
        flops.reset()
        assert flops.multiply_adds == 0


class TestIndexSet:
    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            IndexSet([2, 1], 3)

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            IndexSet([1, 1], 3)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            IndexSet([3], 3)

    def test_equality(self):
        assert IndexSet([0, 2], 4) == IndexSet([0, 2], 4)
        assert IndexSet([0, 2], 4) != IndexSet([0, 2], 5)
