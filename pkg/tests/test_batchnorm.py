"""Batch normalization, folding, linear layer, and the loss."""

import numpy as np
import pytest

from dualspike.ops import (
    BatchNormState,
    batchnorm,
    conv2d,
    cross_entropy,
    fold_bn,
    linear,
)
from dualspike.tensor import ContractError, ShapeError, Tensor, backward, mul, tensor_sum

from conftest import assert_grads_close


class TestForward:
    def test_fresh_eval_is_near_identity(self, rng):
        st = BatchNormState("bn", 3)
        x = rng.standard_normal((4, 3, 2, 2))
        out = batchnorm(Tensor(x), st, training=False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + st.eps), rtol=1e-12)

    def test_train_normalizes_with_biased_variance(self, rng):
        st = BatchNormState("bn", 5)
        x = rng.standard_normal((8, 5, 3, 3)) * 4 + 2
        out = batchnorm(Tensor(x), st, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        # biased (population) variance hits 1 up to eps, unbiased would not
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_constant_batch_returns_beta(self):
        st = BatchNormState("bn", 2)
        st.beta.data[:] = [3.0, -1.0]
        x = np.full((4, 2, 2, 2), 7.0)
        out = batchnorm(Tensor(x), st, training=True).data
        np.testing.assert_allclose(out[:, 0], 3.0)
        np.testing.assert_allclose(out[:, 1], -1.0)

    def test_running_stats_momentum_mix(self, rng):
        st = BatchNormState("bn", 3)
        x = rng.standard_normal((16, 3, 4, 4)) * 2 + 5
        batchnorm(Tensor(x), st, training=True)
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))  # biased
        np.testing.assert_allclose(st.running_mean, 0.1 * mu, rtol=1e-12)
        np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * var, rtol=1e-12)

    def test_eval_does_not_touch_stats(self, rng):
        st = BatchNormState("bn", 3)
        before = st.running_mean.copy(), st.running_var.copy()
        batchnorm(Tensor(rng.standard_normal((4, 3, 2, 2))), st, training=False)
        np.testing.assert_array_equal(st.running_mean, before[0])
        np.testing.assert_array_equal(st.running_var, before[1])

    def test_channel_mismatch(self, rng):
        st = BatchNormState("bn", 3)
        with pytest.raises(ShapeError):
            batchnorm(Tensor(rng.standard_normal((2, 4, 2, 2))), st, training=True)


class TestBackward:
    def test_train_mode_fd(self, rng):
        st = BatchNormState("bn", 3)
        x = Tensor(rng.standard_normal((4, 3, 2, 2)), requires_grad=True)
        proj = Tensor(rng.standard_normal(x.data.shape))
        assert_grads_close(
            lambda: tensor_sum(mul(batchnorm(x, st, training=True), proj)),
            [x, st.gamma, st.beta],
            atol=1e-7,
        )

    def test_eval_mode_fd(self, rng):
        st = BatchNormState("bn", 3)
        st.running_mean = rng.standard_normal(3)
        st.running_var = rng.random(3) + 0.5
        x = Tensor(rng.standard_normal((4, 3, 2, 2)), requires_grad=True)
        proj = Tensor(rng.standard_normal(x.data.shape))
        assert_grads_close(
            lambda: tensor_sum(mul(batchnorm(x, st, training=False), proj)),
            [x, st.gamma, st.beta],
            atol=1e-7,
        )


class TestFolding:
    def test_conv_bn_fold_equivalence(self, rng):
        st = BatchNormState("bn", 4)
        st.running_mean = rng.standard_normal(4)
        st.running_var = rng.random(4) + 0.3
        st.gamma.data[:] = rng.standard_normal(4)
        st.beta.data[:] = rng.standard_normal(4)
        w = rng.standard_normal((4, 3, 3, 3))
        x = rng.standard_normal((2, 3, 8, 8))

        through = batchnorm(conv2d(Tensor(x), Tensor(w), stride=1, padding=1), st, training=False).data
        folded, bias = fold_bn(w, st)
        direct = conv2d(Tensor(x), Tensor(folded), stride=1, padding=1).data + bias[None, :, None, None]
        assert np.abs(through - direct).max() <= 1e-5

    def test_fold_rejects_training_mode(self, rng):
        st = BatchNormState("bn", 2)
        with pytest.raises(ContractError):
            fold_bn(rng.standard_normal((2, 1, 1, 1)), st, training=True)

    def test_fold_shape_contract(self, rng):
        st = BatchNormState("bn", 2)
        with pytest.raises(ShapeError):
            fold_bn(rng.standard_normal((3, 1, 1, 1)), st)


class TestLinearAndLoss:
    def test_linear_value_and_grads(self, rng):
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        b = Tensor(rng.standard_normal(5), requires_grad=True)
        out = linear(x, w, b)
        np.testing.assert_allclose(out.data, x.data @ w.data + b.data)
        assert_grads_close(lambda: tensor_sum(mul(linear(x, w, b), linear(x, w, b))), [x, w, b])

    def test_uniform_logits_loss_is_log_classes(self):
        logits = Tensor(np.zeros((6, 10)))
        labels = np.arange(6) % 10
        loss = cross_entropy(logits, labels)
        np.testing.assert_allclose(loss.item(), np.log(10), rtol=1e-12)

    def test_loss_grad_is_softmax_minus_onehot(self, rng):
        z = rng.standard_normal((3, 4))
        logits = Tensor(z, requires_grad=True)
        labels = np.array([1, 3, 0])
        backward(cross_entropy(logits, labels))
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.eye(4)[labels]
        np.testing.assert_allclose(logits.grad, (p - onehot) / 3, rtol=1e-10)

    def test_loss_fd(self, rng):
        logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        labels = np.array([0, 2, 5, 1])
        assert_grads_close(lambda: cross_entropy(logits, labels), [logits])

    def test_extreme_logits_stay_finite(self):
        logits = Tensor(np.array([[1000.0, -1000.0], [-1000.0, 1000.0]]))
        assert np.isfinite(cross_entropy(logits, np.array([0, 0])).item())

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
