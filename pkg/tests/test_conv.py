"""Convolution and pooling against direct-loop oracles."""

import numpy as np
import pytest

from dualspike.ops import conv2d, conv_output_size, maxpool2d
from dualspike.tensor import ConfigError, ShapeError, Tensor, backward, mul, tensor_sum

from conftest import assert_grads_close


def conv_reference(x, w, stride, padding, groups):
    """Naive nested-loop grouped convolution, the independent oracle."""
    n, c, h, w_in = x.shape
    o, cg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w_in + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oc in range(o):
            gi = oc // og
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[ni, gi * cg + ci, oi * stride + ki, oj * stride + kj]
                                    * w[oc, ci, ki, kj]
                                )
                    out[ni, oc, oi, oj] = acc
    return out


CASES = [
    # n, c, h, w, o, k, stride, padding, groups
    pytest.param(1, 2, 4, 4, 3, 2, 2, 0, 1, id="patchify-2x2"),
    pytest.param(2, 3, 6, 6, 4, 1, 1, 0, 1, id="pointwise"),
    pytest.param(2, 4, 5, 5, 4, 3, 1, 1, 2, id="3x3-grouped"),
    pytest.param(1, 3, 9, 9, 5, 3, 2, 1, 1, id="3x3-stride2"),
    pytest.param(1, 3, 15, 15, 4, 7, 2, 3, 1, id="7x7-stem-shape"),
    pytest.param(2, 6, 8, 8, 6, 4, 4, 0, 3, id="patchify-grouped"),
]


class TestConvForward:
    @pytest.mark.parametrize("n,c,h,w,o,k,s,p,g", CASES)
    def test_matches_loop_oracle(self, rng, n, c, h, w, o, k, s, p, g):
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c // g, k, k))
        out = conv2d(Tensor(x), Tensor(wt), stride=s, padding=p, groups=g)
        np.testing.assert_allclose(out.data, conv_reference(x, wt, s, p, g), atol=1e-12)

    def test_pointwise_equals_matmul(self, rng):
        x = rng.standard_normal((2, 5, 3, 3))
        wt = rng.standard_normal((4, 5, 1, 1))
        out = conv2d(Tensor(x), Tensor(wt))
        expect = np.einsum("oc,nchw->nohw", wt[:, :, 0, 0], x)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_hand_example_2x2(self):
        # single channel 4x4, 2x2 kernel of ones, stride 2: block sums
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        wt = np.ones((1, 1, 2, 2))
        out = conv2d(Tensor(x), Tensor(wt), stride=2)
        np.testing.assert_array_equal(out.data, [[[[10, 18], [42, 50]]]])


class TestConvBackward:
    @pytest.mark.parametrize(
        "n,c,h,w,o,k,s,p,g",
        [
            (1, 2, 4, 4, 2, 2, 2, 0, 1),
            (1, 2, 5, 5, 4, 3, 1, 1, 2),
            (1, 2, 5, 5, 2, 3, 2, 1, 1),
        ],
    )
    def test_fd_gradients(self, rng, n, c, h, w, o, k, s, p, g):
        x = Tensor(rng.standard_normal((n, c, h, w)), requires_grad=True)
        wt = Tensor(rng.standard_normal((o, c // g, k, k)), requires_grad=True)
        proj = Tensor(rng.standard_normal((n, o) + (conv_output_size(h, k, s, p),) * 2))
        assert_grads_close(
            lambda: tensor_sum(mul(conv2d(x, wt, stride=s, padding=p, groups=g), proj)),
            [x, wt],
            atol=1e-8,
        )


class TestConvErrors:
    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv_output_size(4, 7, 1, 0)

    def test_group_divisibility(self, rng):
        x = Tensor(rng.standard_normal((1, 6, 4, 4)))
        wt = Tensor(rng.standard_normal((4, 2, 1, 1)))
        with pytest.raises(ConfigError):
            conv2d(x, wt, groups=4)

    def test_weight_channel_mismatch(self, rng):
        x = Tensor(rng.standard_normal((1, 6, 4, 4)))
        wt = Tensor(rng.standard_normal((4, 5, 1, 1)))
        with pytest.raises(ShapeError):
            conv2d(x, wt)

    def test_input_rank(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))


class TestMaxPool:
    def test_hand_oracle(self):
        x = np.array([[[[1.0, 2, 5, 3], [4, 0, 1, 2], [7, 8, 2, 1], [0, 3, 4, 9]]]])
        out = maxpool2d(Tensor(x), 2, 2)
        np.testing.assert_array_equal(out.data, [[[[4, 5], [8, 9]]]])

    def test_stem_shape_3x3_s2_p1(self, rng):
        x = rng.standard_normal((2, 3, 16, 16))
        out = maxpool2d(Tensor(x), 3, 2, padding=1)
        assert out.data.shape == (2, 3, 8, 8)

    def test_padding_never_wins(self):
        x = -np.ones((1, 1, 2, 2))
        out = maxpool2d(Tensor(x), 3, 2, padding=1)
        assert (out.data == -1).all()

    def test_grad_routes_to_argmax(self):
        x = Tensor(np.array([[[[1.0, 2], [3, 0]]]]), requires_grad=True)
        backward(tensor_sum(maxpool2d(x, 2, 2)))
        np.testing.assert_array_equal(x.grad, [[[[0, 0], [1, 0]]]])

    def test_fd_gradients(self, rng):
        # distinct values keep argmax stable under the FD step
        vals = rng.permutation(36).astype(np.float64).reshape(1, 1, 6, 6)
        x = Tensor(vals, requires_grad=True)
        proj = Tensor(rng.standard_normal((1, 1, 3, 3)))
        assert_grads_close(lambda: tensor_sum(mul(maxpool2d(x, 2, 2), proj)), [x], atol=1e-7)
