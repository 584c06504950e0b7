"""Group-wise spiking FFN: config arithmetic, residual path, shapes."""

import numpy as np
import pytest

from dualspike.ffn import GroupWiseFeedForward, GWSFFNConfig
from dualspike.layers import NeuronSpec, RunContext
from dualspike.neuron import sn_forward
from dualspike.tensor import ConfigError, ShapeError, Tensor, backward, no_grad


def build_ffn(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return GroupWiseFeedForward("ffn", cfg, NeuronSpec(), rng=rng, dtype=np.float64)


class TestConfig:
    def test_hidden_and_groups(self):
        cfg = GWSFFNConfig(d=192, expansion=4, group_width=64)
        assert cfg.hidden == 768
        assert cfg.groups == 12

    def test_group_width_must_tile_hidden(self):
        with pytest.raises(ConfigError):
            GWSFFNConfig(d=48, expansion=1, group_width=64)

    def test_expansion_validated(self):
        with pytest.raises(ConfigError):
            GWSFFNConfig(d=64, expansion=0)


class TestForward:
    def test_shape_preserved(self, rng):
        cfg = GWSFFNConfig(d=32, expansion=4, group_width=64)
        ffn = build_ffn(cfg)
        x = Tensor(rng.standard_normal((2, 2, 32, 4, 4)))
        with no_grad():
            out = ffn.forward(x, RunContext(training=False))
        assert out.data.shape == (2, 2, 32, 4, 4)

    def test_channel_contract(self, rng):
        cfg = GWSFFNConfig(d=32, expansion=2, group_width=64)
        ffn = build_ffn(cfg)
        with pytest.raises(ShapeError):
            ffn.forward(Tensor(rng.standard_normal((2, 2, 16, 4, 4))), RunContext())

    def test_gwl_residual_identity_when_conv_silenced(self, rng):
        # zero the group conv weight: gwl(x) must reduce to BN(0) + x = beta + x
        cfg = GWSFFNConfig(d=64, expansion=1, group_width=64)
        ffn = build_ffn(cfg)
        ffn.conv_g.weight.data[:] = 0.0
        x = Tensor(rng.standard_normal((2, 1, 64, 3, 3)))
        with no_grad():
            out = ffn.gwl(x, RunContext(training=False))
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_gwl_groups_do_not_mix(self, rng):
        # perturb channels of group 0 only; eval-mode gwl output for the other
        # group's channels must not move (minus the residual change itself)
        cfg = GWSFFNConfig(d=32, expansion=4, group_width=64)  # hidden 128, 2 groups
        ffn = build_ffn(cfg)
        ctx = RunContext(training=False)
        x = rng.standard_normal((2, 1, 128, 3, 3))
        x2 = x.copy()
        x2[:, :, :64] += rng.standard_normal((2, 1, 64, 3, 3))
        with no_grad():
            a = ffn.gwl(Tensor(x), ctx).data
            b = ffn.gwl(Tensor(x2), ctx).data
        np.testing.assert_allclose(
            b[:, :, 64:] - x2[:, :, 64:], a[:, :, 64:] - x[:, :, 64:], atol=1e-12
        )

    def test_ffl_matches_manual_pointwise(self, rng):
        cfg = GWSFFNConfig(d=16, expansion=4, group_width=64)
        ffn = build_ffn(cfg)
        x = Tensor(rng.standard_normal((2, 1, 16, 2, 2)))
        with no_grad():
            out = ffn.ffl(x, RunContext(training=False), 1)
        s = sn_forward(Tensor(x.data)).data
        w = ffn.conv1.weight.data[:, :, 0, 0]
        z = np.einsum("oc,tbchw->tbohw", w, s)
        inv = 1.0 / np.sqrt(ffn.bn1.running_var + ffn.bn1.eps)
        expect = z * (ffn.bn1.gamma.data * inv)[None, None, :, None, None]
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_ffl_index_validated(self, rng):
        cfg = GWSFFNConfig(d=16, expansion=4, group_width=64)
        ffn = build_ffn(cfg)
        with pytest.raises(ConfigError):
            ffn.ffl(Tensor(rng.standard_normal((1, 1, 16, 2, 2))), RunContext(), 3)

    def test_parameter_count_closed_form(self):
        # conv1 d*h + gwl 9*h*gw... per group: h/g groups of (gw x gw x 3 x 3)
        # weights + 3 BN gamma/beta pairs; conv2 h*d
        cfg = GWSFFNConfig(d=32, expansion=4, group_width=64)
        ffn = build_ffn(cfg)
        h = cfg.hidden
        expect = 32 * h + 2 * h + h * 64 * 9 + 2 * h + h * 32 + 2 * 32
        assert sum(p.data.size for p in ffn.parameters()) == expect

    def test_gradients_flow_to_all_parameters(self, rng):
        cfg = GWSFFNConfig(d=8, expansion=8, group_width=64)
        ffn = build_ffn(cfg)
        x = Tensor(rng.standard_normal((2, 2, 8, 3, 3)) * 2)
        out = ffn.forward(x, RunContext(training=True, smooth=True))
        backward((out * out).mean())
        for p in ffn.parameters():
            assert p.grad is not None, p.name
            assert np.isfinite(p.grad).all(), p.name
