import numpy as np
import pytest

import glyphgraph.tensor as T
from glyphgraph import gradcheck
from glyphgraph.errors import ContractError


class TestBackwardBasics:
    def test_sum_of_squares(self):
        x = T.const([3.0])
        with T.tape() as tp:
            tp.watch(x)
            loss = T.frobenius_sq(x)
            tp.backward(loss)
        assert np.array_equal(x.grad, [6.0])

    def test_unused_parameter_has_zero_grad(self):
        p = T.Parameter(np.ones((2, 2)), name="unused")
        x = T.const([1.0, 2.0])
        with T.tape() as tp:
            tp.watch_trainable([p])
            tp.watch(x)
            loss = T.sum_(x)
            tp.backward(loss)
        assert np.array_equal(p.grad, np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        x = T.const([1.0, 2.0])
        with T.tape() as tp:
            tp.watch(x)
            y = T.scale(x, 2.0)
            with pytest.raises(ContractError):
                tp.backward(y)

    def test_fanout_accumulates(self):
        x = T.const([2.0])
        with T.tape() as tp:
            tp.watch(x)
            loss = T.sum_(T.add(T.mul(x, x), x))  # x^2 + x -> 2x + 1 = 5
            tp.backward(loss)
        assert np.allclose(x.grad, [5.0])

    def test_grad_sum_of_losses_equals_sum_of_grads(self):
        rng = np.random.default_rng(11)
        xv = rng.uniform(-2, 2, (3, 3))

        def grads_for(fn):
            x = T.const(xv)
            with T.tape() as tp:
                tp.watch(x)
                tp.backward(fn(x))
            return x.grad

        ga = grads_for(lambda x: T.frobenius_sq(x))
        gb = grads_for(lambda x: T.l1_norm(x))
        gboth = grads_for(lambda x: T.add(T.frobenius_sq(x), T.l1_norm(x)))
        assert np.abs(gboth - (ga + gb)).max() < 1e-12

    def test_two_passes_bit_identical(self):
        rng_data = np.random.default_rng(5).uniform(-1, 1, (4, 4))

        def run():
            x = T.const(rng_data.copy())
            g = T.const(np.ones(4))
            b = T.const(np.zeros(4))
            with T.tape() as tp:
                tp.watch(x)
                y = T.layernorm(T.gelu(x), g, b)
                y = T.dropout(y, 0.5, training=True, rng=np.random.default_rng(7))
                loss = T.frobenius_sq(y)
                tp.backward(loss)
            return loss.item(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)

    def test_frozen_parameter_receives_no_grad(self):
        frozen = T.Parameter(np.ones((2, 2)), name="frozen", trainable=False)
        live = T.Parameter(np.full((2, 2), 2.0), name="live", trainable=True)
        with T.tape() as tp:
            tp.watch_trainable([frozen, live])
            loss = T.frobenius_sq(T.mul(frozen.tensor, live.tensor))
            tp.backward(loss)
        assert frozen.tensor.grad is None
        assert np.allclose(live.grad, 2.0 * 2.0 * np.ones((2, 2)))


class TestFiniteDifferenceSuites:
    """Every differentiable op agrees with central differences at 1e-4."""

    @pytest.mark.parametrize("op", gradcheck.op_names())
    def test_op(self, op):
        assert gradcheck.run_op_check(op) < gradcheck.OP_TOL

    def test_selftest_op_is_caught(self):
        assert gradcheck.run_op_check("selftest-bad") > gradcheck.OP_TOL

    def test_matmul_derived_case(self):
        # spec-sized case: random 3x4 by 4x2 at h=1e-5 within 1e-4 relative
        rng = np.random.default_rng(21)
        err = gradcheck.check_function(
            lambda ts: T.sum_(T.matmul(ts[0], ts[1])),
            [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))],
        )
        assert err < 1e-4

    def test_layernorm_gradient(self):
        rng = np.random.default_rng(22)
        err = gradcheck.check_function(
            lambda ts: T.sum_(T.layernorm(ts[0], ts[1], ts[2])),
            [rng.uniform(-2, 2, (2, 5)), rng.uniform(0.5, 2, 5), rng.uniform(-1, 1, 5)],
        )
        assert err < 1e-4

    def test_l1_subgradient_at_zero_is_zero(self):
        x = T.const([[0.0, 2.0, -3.0]])
        with T.tape() as tp:
            tp.watch(x)
            tp.backward(T.l1_norm(x))
        assert np.array_equal(x.grad, [[0.0, 1.0, -1.0]])
