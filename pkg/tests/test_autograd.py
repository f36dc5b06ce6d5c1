import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcases import CASES, check_case

from sarlab import autograd as ag


finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


class TestForwardExamples:
    def test_row_softmax_of_zero_and_ln2(self):
        out = ag.row_softmax(ag.tensor([[0.0, math.log(2.0)]])).data
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], rtol=0, atol=1e-15)

    def test_leaky_relu_negative_one(self):
        assert ag.leaky_relu(ag.tensor([-1.0]), 0.2).data[0] == pytest.approx(-0.2, abs=1e-15)

    def test_maxpool_columnwise(self):
        out = ag.maxpool_rows(ag.tensor([[1.0, 5.0], [3.0, 2.0]])).data
        assert out.tolist() == [3.0, 5.0]

    def test_gelu_uses_exact_erf(self):
        from scipy.special import erf
        x = np.linspace(-3, 3, 13)
        expected = 0.5 * x * (1 + erf(x / math.sqrt(2)))
        np.testing.assert_allclose(ag.gelu(ag.tensor(x)).data, expected, atol=1e-15)


class TestBackwardExamples:
    def test_product_rule(self):
        x, y = ag.parameter(2.0), ag.parameter(3.0)
        ag.backward(ag.mul(x, y))
        assert x.grad == 3.0 and y.grad == 2.0

    def test_softmax_jacobian_at_uniform(self):
        x = ag.parameter([[0.0, 0.0]])
        ag.backward(ag.pick(ag.row_softmax(x), [0], [0]))
        np.testing.assert_allclose(x.grad, [[0.25, -0.25]], atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = ag.parameter([1.0, 2.0])
        with pytest.raises(ag.ShapeError):
            ag.backward(ag.scale(x, 2.0))

    def test_gradients_accumulate_over_shared_leaf(self):
        x = ag.parameter([1.0, -2.0])
        ag.backward(ag.add(ag.sum(x), ag.sq_norm(x)))
        np.testing.assert_allclose(x.grad, [3.0, -3.0])

    def test_no_grad_records_nothing(self):
        x = ag.parameter([1.0])
        with ag.no_grad():
            y = ag.scale(x, 3.0)
            assert not ag.grad_enabled()
        assert ag.grad_enabled()
        assert y.is_leaf and not y.requires_grad

    def test_shape_error_names_shapes(self):
        with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(ag.tensor(np.ones((2, 3))), ag.tensor(np.ones((2, 3))))


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(CASES))
    def test_case_matches_central_differences(self, name):
        worst = max(check_case(name, seed) for seed in range(20))
        assert worst < 1e-4


class TestSoftmaxProperties:
    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=finite))
    def test_rows_sum_to_one_and_are_positive(self, x):
        out = ag.row_softmax(ag.tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert (out > 0).all()

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (8, 2), elements=finite), st.integers(0, 1000))
    def test_segment_softmax_sums_per_segment(self, x, seed):
        seg = np.random.default_rng(seed).integers(0, 3, size=8)
        seg[:3] = [0, 1, 2]
        out = ag.segment_softmax(ag.tensor(x), seg, 3).data
        for s in range(3):
            np.testing.assert_allclose(out[seg == s].sum(axis=0), 1.0, atol=1e-12)

    def test_masked_entries_get_zero_output_and_gradient(self):
        x = ag.parameter([[1.0, 2.0, 3.0]])
        mask = np.array([[True, False, True]])
        out = ag.masked_log_softmax(x, mask)
        assert out.data[0, 1] == 0.0
        ag.backward(ag.sum(out))
        assert x.grad[0, 1] == 0.0


class TestConcat:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
    def test_backward_splits_upstream_exactly(self, n1, n2, seed):
        rng = np.random.default_rng(seed)
        a, b = ag.parameter(rng.normal(size=(n1, 3))), ag.parameter(rng.normal(size=(n2, 3)))
        w = rng.normal(size=(n1 + n2, 3))
        ag.backward(ag.sum(ag.mul(ag.concat([a, b]), ag.tensor(w))))
        np.testing.assert_array_equal(np.concatenate([a.grad, b.grad]), w)
        whole = np.sum(w * w)
        assert np.sum(a.grad ** 2) + np.sum(b.grad ** 2) == pytest.approx(whole, rel=1e-15)


class TestDropout:
    def test_identity_in_eval(self):
        x = ag.tensor(np.arange(6.0))
        assert ag.dropout(x, 0.5, np.random.default_rng(0), training=False) is x

    def test_same_seed_same_mask(self):
        x = ag.tensor(np.ones(50))
        a = ag.dropout(x, 0.3, np.random.default_rng(5), True).data
        b = ag.dropout(x, 0.3, np.random.default_rng(5), True).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1 / 0.7}
