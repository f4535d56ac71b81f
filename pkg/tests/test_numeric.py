import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtcompress.numeric import (
    as_tensor,
    finite_diff_grad,
    matmul,
    max_pool,
    softmax,
    stable_sort_desc,
)


def matmul_oracle(a, b):
    """Naive triple loop, k ascending. Independent of the library path."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestAsTensor:
    def test_reshapes_and_validates_length(self):
        t = as_tensor([1.0, 2.0, 3.0, 4.0], dims=(2, 2))
        assert t.shape == (2, 2)
        assert t.dtype == np.float64

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not match"):
            as_tensor([1.0, 2.0, 3.0], dims=(2, 2))

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            as_tensor([], dims=(0, 2))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValueError, match="non-finite"):
            as_tensor([1.0, bad])


class TestMatmul:
    def test_identity(self):
        a = np.array([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_hand_case(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out, [[11.0]])

    def test_zero_left_operand(self):
        out = matmul(np.zeros((2, 3)), np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_bit_exact_against_triple_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = rng.standard_normal((10, 10))
            b = rng.standard_normal((10, 10))
            np.testing.assert_array_equal(matmul(a, b), matmul_oracle(a, b))


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)

    def test_hand_computed(self):
        # exp([2,1,0]) = [7.389056, 2.718282, 1]; sum = 11.107338
        np.testing.assert_allclose(
            softmax([2.0, 1.0, 0.0]), [0.66524, 0.24473, 0.09003], atol=1e-4
        )

    def test_large_logits_do_not_overflow(self):
        out = softmax([1000.0, 0.0])
        np.testing.assert_array_equal(out, [1.0, 0.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            softmax([])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 9))
        np.testing.assert_allclose(softmax(x, axis=-1).sum(axis=-1), 1.0, atol=1e-9)

    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=16),
        st.floats(-100, 100),
    )
    @settings(max_examples=200, deadline=None)
    def test_shift_invariance(self, logits, shift):
        v = np.array(logits)
        np.testing.assert_allclose(softmax(v + shift), softmax(v), atol=1e-12)


class TestMaxPool:
    def test_constant_block(self):
        block = np.full((4, 4, 2), 3.5)
        np.testing.assert_array_equal(max_pool(block, (2, 2)), np.full((2, 2, 2), 3.5))

    def test_direct_max(self):
        block = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        np.testing.assert_array_equal(max_pool(block, (2, 2)), [[[4.0]]])

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        block = rng.standard_normal((4, 4, 3))
        np.testing.assert_array_equal(max_pool(block, (1, 1)), block)

    def test_non_divisible_kernel_rejected(self):
        with pytest.raises(ValueError, match="does not divide"):
            max_pool(np.zeros((4, 4, 1)), (3, 2))

    def test_outputs_are_window_members_and_full_kernel_gives_global_max(self):
        rng = np.random.default_rng(2)
        block = rng.standard_normal((6, 4, 2))
        out = max_pool(block, (2, 2))
        for bi in range(3):
            for bj in range(2):
                for c in range(2):
                    window = block[2 * bi : 2 * bi + 2, 2 * bj : 2 * bj + 2, c]
                    assert out[bi, bj, c] in window
        full = max_pool(block, (6, 4))
        np.testing.assert_array_equal(full[0, 0], block.max(axis=(0, 1)))


class TestStableSortDesc:
    def test_manual_sort(self):
        np.testing.assert_array_equal(stable_sort_desc([0.1, 0.4, 0.2]), [1, 2, 0])

    def test_tie_stability(self):
        np.testing.assert_array_equal(stable_sort_desc([0.5, 0.5]), [0, 1])

    def test_empty(self):
        assert stable_sort_desc([]).size == 0

    @given(st.lists(st.floats(-1e6, 1e6), max_size=64))
    @settings(max_examples=200, deadline=None)
    def test_permutation_and_ordering(self, values):
        v = np.array(values)
        order = stable_sort_desc(v)
        assert sorted(order.tolist()) == list(range(len(values)))
        s = v[order]
        assert np.all(s[:-1] >= s[1:])

    def test_idempotent_on_sorted_input(self):
        v = np.array([5.0, 3.0, 3.0, 1.0])
        np.testing.assert_array_equal(stable_sort_desc(v), np.arange(4))


class TestFiniteDiffGrad:
    def test_quadratic(self):
        grad = finite_diff_grad(lambda x: float(x[0] * x[0]), np.array([3.0]))
        np.testing.assert_allclose(grad, [6.0], atol=1e-6)

    def test_constant_function(self):
        grad = finite_diff_grad(lambda x: 1.25, np.array([0.3, -0.7, 2.0]))
        np.testing.assert_array_equal(grad, np.zeros(3))

    def test_sum_function(self):
        grad = finite_diff_grad(lambda x: float(np.sum(x)), np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(grad, np.ones(3), atol=1e-9)

    def test_preserves_input_and_shape(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        before = x.copy()
        grad = finite_diff_grad(lambda p: float(np.sum(p**2)), x)
        np.testing.assert_array_equal(x, before)
        np.testing.assert_allclose(grad, 2 * x, rtol=1e-8)

    def test_non_finite_objective_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff_grad(lambda x: float("nan"), np.array([1.0]))
