"""Tensor engine: forward op values, exact gradients, error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenrec import tensor as T
from greenrec.tensor import (GradAccumulationError, NonFiniteError, Parameter,
                             ShapeError, constant)

from conftest import finite_difference_check


class TestForwardValues:
    def test_softmax_uniform(self):
        out = T.softmax(constant(np.zeros((2, 3))), axis=1)
        np.testing.assert_allclose(out.data, 1.0 / 3.0)

    def test_softmax_rows_sum_to_one(self, rng):
        x = constant(rng.normal(size=(4, 7)) * 10)
        out = T.softmax(x, axis=1)
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)

    def test_cross_entropy_uniform_logits_is_log_k(self):
        for k in (2, 5, 17):
            ce = T.cross_entropy(constant(np.zeros((3, k))), np.array([0, 1, k - 1]))
            assert ce.item() == pytest.approx(np.log(k), rel=1e-12)

    def test_layer_norm_constant_vector_is_zero_before_affine(self):
        gain = constant(np.ones(5))
        bias = constant(np.zeros(5))
        out = T.layer_norm(constant(np.full((2, 5), 3.7)), gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_matmul_matches_numpy(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_array_equal(T.matmul(constant(a), constant(b)).data, a @ b)

    def test_embedding_lookup_gathers_rows(self, rng):
        table = rng.normal(size=(6, 3))
        ids = np.array([[0, 5], [2, 2]])
        out = T.embedding_lookup(constant(table), ids)
        np.testing.assert_array_equal(out.data, table[ids])

    def test_gelu_fixed_points(self):
        out = T.gelu(constant(np.array([0.0, 100.0, -100.0])))
        np.testing.assert_allclose(out.data, [0.0, 100.0, 0.0], atol=1e-12)

    def test_sigmoid_of_zero(self):
        assert T.sigmoid(constant(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]

    def test_mean_and_sum_axes(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(T.mean(constant(x), axis=1).data, x.mean(axis=1))
        np.testing.assert_allclose(T.tsum(constant(x)).data, x.sum())

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_softmax_distribution_property(self, values):
        out = T.softmax(constant(np.array([values])), axis=1)
        assert (out.data >= 0).all()
        assert abs(out.data.sum() - 1.0) <= 1e-9


class TestShapeAndFiniteErrors:
    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            T.matmul(constant(np.zeros((2, 3))), constant(np.zeros((2, 3))))

    def test_add_rejects_mismatched(self):
        with pytest.raises(ShapeError, match="add"):
            T.add(constant(np.zeros((2, 3))), constant(np.zeros((3, 2))))

    def test_non_finite_forward_is_hard_error(self):
        big = constant(np.full((2, 2), 1e200))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            T.matmul(big, big)

    def test_softmax_axis_validated(self):
        with pytest.raises(ShapeError):
            T.softmax(constant(np.zeros((2, 2))), axis=5)

    def test_cross_entropy_target_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(constant(np.zeros((1, 3))), np.array([3]))


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = Parameter("x", np.array([1.0, 2.0, 3.0]))
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_detached_inputs_get_no_grad(self):
        frozen = constant(np.array([[1.0, 2.0]]))
        w = Parameter("w", np.array([[1.0], [1.0]]))
        T.backward(T.tsum(T.matmul(frozen, w)))
        assert frozen.grad is None
        assert w.grad is not None

    def test_double_backward_without_zeroing_raises(self):
        x = Parameter("x", np.ones(2))
        loss = T.tsum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(GradAccumulationError):
            T.backward(T.tsum(T.mul(x, x)))

    def test_explicit_accumulation_adds(self):
        x = Parameter("x", np.array([3.0]))
        T.backward(T.tsum(T.mul(x, x)))
        T.backward(T.tsum(T.mul(x, x)), accumulate=True)
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_backward_requires_scalar(self):
        x = Parameter("x", np.ones(3))
        with pytest.raises(ShapeError):
            T.backward(T.mul(x, x))

    def test_shared_node_grad_sums(self):
        x = Parameter("x", np.array([2.0]))
        y = T.mul(x, x)               # y = x^2
        loss = T.tsum(T.add(y, y))    # loss = 2 x^2, d/dx = 4x = 8
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [8.0])


class TestGradientsAgainstFiniteDifferences:
    """DERIVED oracle: op gradients vs central finite differences."""

    def test_composite_graph_matches_fd(self, rng):
        w1 = Parameter("w1", rng.normal(size=(4, 5)))
        b1 = Parameter("b1", rng.normal(size=5) * 0.1)
        w2 = Parameter("w2", rng.normal(size=(5, 3)))
        gain = Parameter("gain", np.ones(5) + rng.normal(size=5) * 0.1)
        bias = Parameter("bias", rng.normal(size=5) * 0.1)
        x = rng.normal(size=(2, 4))
        targets = np.array([0, 2])

        def forward():
            h = T.layer_norm(T.gelu(T.add(T.matmul(constant(x), w1), b1)), gain, bias)
            logits = T.matmul(T.tanh(h), w2)
            return T.cross_entropy(logits, targets)

        T.backward(forward())
        n = finite_difference_check(lambda: forward().item(), [w1, b1, w2, gain, bias])
        assert n == 4 * 5 + 5 + 5 * 3 + 5 + 5

    def test_attention_style_graph_matches_fd(self, rng):
        wq = Parameter("wq", rng.normal(size=(4, 4)) * 0.5)
        wv = Parameter("wv", rng.normal(size=(4, 4)) * 0.5)
        x = rng.normal(size=(2, 3, 4))

        def forward():
            q = T.matmul(constant(x), wq)
            v = T.matmul(constant(x), wv)
            scores = T.matmul(q, T.transpose(v, (0, 2, 1)))
            attn = T.softmax(scores, axis=-1)
            ctx = T.matmul(attn, v)
            return T.mean(T.mul(ctx, ctx))

        T.backward(forward())
        finite_difference_check(lambda: forward().item(), [wq, wv])

    def test_lookup_scatter_and_pool_matches_fd(self, rng):
        table = Parameter("emb", rng.normal(size=(7, 3)) * 0.5)
        ids = np.array([[1, 1, 4], [0, 6, 4]])
        alpha = Parameter("alpha", rng.normal(size=(2, 3, 1)))

        def forward():
            e = T.embedding_lookup(table, ids)
            pooled = T.tsum(T.rowscale(e, alpha), axis=1)
            flat = T.reshape(pooled, (2 * 3,))
            return T.tsum(T.mul(T.sigmoid(flat), T.tanh(flat)))

        T.backward(forward())
        finite_difference_check(lambda: forward().item(), [table, alpha])

    def test_bce_and_concat_match_fd(self, rng):
        w = Parameter("w", rng.normal(size=(6, 1)))
        a = rng.normal(size=(3, 2))
        b = rng.normal(size=(3, 4))
        labels = np.array([1.0, 0.0, 1.0])

        def forward():
            x = T.concat([constant(a), constant(b)], axis=1)
            z = T.reshape(T.matmul(x, w), (3,))
            return T.bce_with_logits(z, labels)

        T.backward(forward())
        finite_difference_check(lambda: forward().item(), [w])
