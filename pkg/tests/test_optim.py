"""Adam optimizer behavior."""

import numpy as np
import pytest

from greenrec import tensor as T
from greenrec.optim import Adam
from greenrec.tensor import NonFiniteError, Parameter


def test_single_step_descends_quadratic():
    w = Parameter("w", np.array([1.0]))
    opt = Adam([w], lr=0.1)
    T.backward(T.tsum(T.mul(w, w)))
    opt.step()
    assert w.data[0] < 1.0


def test_zero_gradient_leaves_parameters_unchanged():
    w = Parameter("w", np.array([2.0, -3.0]))
    opt = Adam([w], lr=0.1)
    w.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(w.data, [2.0, -3.0])


def test_missing_gradient_skips_parameter():
    w = Parameter("w", np.array([1.5]))
    Adam([w], lr=0.1).step()
    np.testing.assert_array_equal(w.data, [1.5])


def test_non_finite_gradient_errors():
    w = Parameter("w", np.array([1.0]))
    w.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError):
        Adam([w], lr=0.1).step()


def test_converges_to_closed_form_minimum_of_quadratic():
    # DERIVED: f(w) = (w0 - 1.5)^2 + 4 (w1 + 0.25)^2 has minimum (1.5, -0.25)
    target = np.array([1.5, -0.25])
    scale = np.array([1.0, 4.0])
    w = Parameter("w", np.zeros(2))
    opt = Adam([w], lr=0.05)
    for _ in range(500):
        diff = T.add(w, T.constant(-target))
        loss = T.tsum(T.mul(T.mul(diff, diff), T.constant(scale)))
        T.backward(loss)
        opt.step()
        opt.zero_grad()
    np.testing.assert_allclose(w.data, target, atol=1e-3)


def test_fixed_seed_training_is_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        w = Parameter("w", rng.normal(size=(3, 3)))
        x = T.constant(rng.normal(size=(4, 3)))
        opt = Adam([w], lr=1e-2)
        for _ in range(20):
            loss = T.mean(T.mul(T.matmul(x, w), T.matmul(x, w)))
            T.backward(loss)
            opt.step()
            opt.zero_grad()
        return w.data.tobytes()

    assert run() == run()
