"""Dual-spike transformations and spiking self-attention.

Both transformation directions contract a binary operand against a
generalized linear map f (conv + batch norm, foldable to one matrix):

    dst(X, Y; f)   = X @ f(Y)        -- spike rows gate columns of f(Y)
    dst_t(X, Y; f) = X @ f(Y)^T

With X Bernoulli(rate) and f(Y) entries mean-0/var-1, the resulting current
has mean 0 and variance rate * fan_in, so dividing by sqrt(rate * fan_in)
restores unit variance before the next firing stage. Firing rates are not
known at eval time, so they are tracked with a slow EMA during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Conv2d, Module, NeuronSpec, RunContext, SpikingNeuron
from .neuron import sn_forward
from .tensor import ConfigError, ContractError, ShapeError, SpikeTensor, Tensor, matmul, mul, reshape, transpose

RATE_FLOOR = 1e-4


@dataclass
class DSSAConfig:
    d: int
    height: int
    width: int
    p: int
    heads: int = 1

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.height % self.p or self.width % self.p:
            raise ConfigError(f"patch size p={self.p} must divide spatial {self.height}x{self.width}")

    @property
    def hw(self) -> int:
        return self.height * self.width

    @property
    def tokens_reduced(self) -> int:
        return (self.height // self.p) * (self.width // self.p)

    @property
    def d_head(self) -> int:
        return self.d // self.heads


class FiringRateEMA:
    """Slow exponential moving average of an observed firing rate.

    The first observation seeds the value directly; afterwards
    value <- momentum * value + (1 - momentum) * batch_rate. Eval-time
    observations never update; an uninitialized estimator at eval falls back
    to the observed batch rate so untrained models still scale sensibly.
    """

    def __init__(self, name: str, momentum: float = 0.999):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"EMA momentum must lie in [0, 1), got {momentum}")
        self.name = name
        self.momentum = momentum
        self.value = 0.0
        self.initialized = False

    def update(self, batch_rate: float) -> float:
        if not 0.0 <= batch_rate <= 1.0:
            raise ContractError(f"firing rate must lie in [0, 1], got {batch_rate}")
        if not self.initialized:
            self.value = float(batch_rate)
            self.initialized = True
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * float(batch_rate)
        return self.value

    def observe(self, batch_rate: float, training: bool) -> float:
        if training:
            return self.update(batch_rate)
        if self.initialized:
            return self.value
        if not 0.0 <= batch_rate <= 1.0:
            raise ContractError(f"firing rate must lie in [0, 1], got {batch_rate}")
        return float(batch_rate)


def _ensure_binary(x: Tensor, label: str) -> None:
    if isinstance(x, SpikeTensor):
        return
    if not bool(((x.data == 0.0) | (x.data == 1.0)).all()):
        raise ContractError(f"{label} operand of a dual-spike transformation must be binary")


# -- scales -----------------------------------------------------------------


def dst_scale(rate: float, fan_in: int) -> float:
    """1 / sqrt(rate * fan_in), with the rate floored to keep the scale finite."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be positive, got {fan_in}")
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"firing rate must lie in [0, 1], got {rate}")
    return 1.0 / np.sqrt(max(rate, RATE_FLOOR) * fan_in)


def attn_map_scale(rate_x: float, d: int) -> float:
    """Scale for the attention-map transformation (fan-in = feature width d)."""
    return dst_scale(rate_x, d)


def output_scale(rate_attn: float, hw: int, p: int) -> float:
    """Scale for the output transformation (fan-in = HW / p^2 reduced tokens)."""
    if p < 1 or hw % (p * p):
        raise ConfigError(f"p={p} must satisfy p^2 | HW (HW={hw})")
    return dst_scale(rate_attn, hw // (p * p))


def sdsa_scale(f_q: float, f_k: float, hw: int) -> float:
    """Scale for plain spike-product attention: Var(I) = HW * fq*fk*(1 - fq*fk)."""
    if hw < 1:
        raise ConfigError(f"HW must be positive, got {hw}")
    for r in (f_q, f_k):
        if not 0.0 <= r <= 1.0:
            raise ContractError(f"firing rate must lie in [0, 1], got {r}")
    prod = f_q * f_k
    return 1.0 / np.sqrt(hw * max(prod * (1.0 - prod), RATE_FLOOR))


# -- functional transformations ----------------------------------------------


def dst(x: Tensor, y: Tensor, f) -> Tensor:
    """X @ f(Y) over the last two axes (leading axes batch)."""
    _ensure_binary(x, "left")
    _ensure_binary(y, "right")
    return matmul(x, f(y))


def dst_t(x: Tensor, y: Tensor, f) -> Tensor:
    """X @ f(Y)^T over the last two axes."""
    _ensure_binary(x, "left")
    _ensure_binary(y, "right")
    fy = f(y)
    axes = tuple(range(fy.data.ndim - 2)) + (fy.data.ndim - 1, fy.data.ndim - 2)
    return matmul(x, transpose(fy, axes))


def attn_map(
    x: Tensor,
    f,
    rate_x: FiringRateEMA,
    *,
    neuron: NeuronSpec = NeuronSpec(),
    training: bool = False,
    smooth: bool = False,
) -> Tensor:
    """Binary attention map: SN(dst_t(x, x; f) * c1), c1 = 1/sqrt(f_X * d)."""
    rate = rate_x.observe(float(x.data.mean()), training)
    c1 = attn_map_scale(rate, x.data.shape[-1])
    return sn_forward(mul(dst_t(x, x, f), c1), neuron.lif, neuron.surrogate, smooth=smooth)


def dssa(
    x: Tensor,
    f_map,
    f_val,
    rate_x: FiringRateEMA,
    rate_attn: FiringRateEMA,
    *,
    neuron: NeuronSpec = NeuronSpec(),
    training: bool = False,
    smooth: bool = False,
) -> Tensor:
    """Single-head dual-spike self-attention on token spikes [T, ..., HW, d]."""
    amap = attn_map(x, f_map, rate_x, neuron=neuron, training=training, smooth=smooth)
    rate_a = rate_attn.observe(float(amap.data.mean()), training)
    c2 = dst_scale(rate_a, amap.data.shape[-1])
    cur = mul(dst(amap, x, f_val), c2)
    return sn_forward(cur, neuron.lif, neuron.surrogate, smooth=smooth)


# -- multi-head module --------------------------------------------------------


class MultiHeadDualSpikeAttention(Module):
    """Multi-head DSSA block stage: SN, per-head attention, 1x1 merge.

    One patch-embedding conv serves all heads; its output channels are split
    head-wise. Firing-rate EMAs are shared across heads (one for the input
    spikes, one for the attention maps), so heads differ only through d_head.
    """

    def __init__(self, name: str, cfg: DSSAConfig, neuron: NeuronSpec, *, rng, dtype):
        self.name = name
        self.cfg = cfg
        self.lif_in = SpikingNeuron(neuron)
        self.lif_map = SpikingNeuron(neuron)
        self.lif_out = SpikingNeuron(neuron)
        self.conv_map = Conv2d(f"{name}.embed_map", cfg.d, cfg.d, cfg.p, stride=cfg.p, padding=0, rng=rng, dtype=dtype)
        self.bn_map = ops.BatchNormState(f"{name}.embed_map.bn", cfg.d, dtype=dtype)
        self.conv_val = Conv2d(f"{name}.embed_val", cfg.d, cfg.d, cfg.p, stride=cfg.p, padding=0, rng=rng, dtype=dtype)
        self.bn_val = ops.BatchNormState(f"{name}.embed_val.bn", cfg.d, dtype=dtype)
        self.conv_proj = Conv2d(f"{name}.proj", cfg.d, cfg.d, 1, rng=rng, dtype=dtype)
        self.bn_proj = ops.BatchNormState(f"{name}.proj.bn", cfg.d, dtype=dtype)
        self.rate_x = FiringRateEMA(f"{name}.rate_x")
        self.rate_attn = FiringRateEMA(f"{name}.rate_attn")

    def parameters(self):
        return (
            self.conv_map.parameters()
            + self.bn_map.parameters()
            + self.conv_val.parameters()
            + self.bn_val.parameters()
            + self.conv_proj.parameters()
            + self.bn_proj.parameters()
        )

    def bn_states(self):
        return [self.bn_map, self.bn_val, self.bn_proj]

    def rate_emas(self):
        return [self.rate_x, self.rate_attn]

    def _embed_tokens(self, spikes_4d: Tensor, conv: Conv2d, bn: ops.BatchNormState, ctx: RunContext, tb: tuple):
        """Conv_p + BN on [T*B,d,H,W] spikes -> per-head token features [T,B,h,np,dh]."""
        t, b = tb
        cfg = self.cfg
        z = ops.batchnorm(conv.forward(spikes_4d), bn, ctx.training)
        z = reshape(z, (t, b, cfg.heads, cfg.d_head, cfg.tokens_reduced))
        return z

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        cfg = self.cfg
        if x.data.ndim != 5 or x.data.shape[2:] != (cfg.d, cfg.height, cfg.width):
            raise ShapeError(f"{self.name} expects [T,B,{cfg.d},{cfg.height},{cfg.width}], got {x.data.shape}")
        t, b = x.data.shape[:2]

        s_in = self.lif_in.forward(x, ctx)
        rate_in = self.rate_x.observe(float(s_in.data.mean()), ctx.training)

        s4 = reshape(s_in, (t * b, cfg.d, cfg.height, cfg.width))
        # head-split token view of the input spikes: [T,B,h,HW,dh]
        xh = transpose(reshape(s_in, (t, b, cfg.heads, cfg.d_head, cfg.hw)), (0, 1, 2, 4, 3))

        z_map = self._embed_tokens(s4, self.conv_map, self.bn_map, ctx, (t, b))  # [T,B,h,dh,np]
        c1 = attn_map_scale(rate_in, cfg.d_head)
        amap = self.lif_map.forward(mul(matmul(xh, z_map), c1), ctx)  # [T,B,h,HW,np] binary

        rate_a = self.rate_attn.observe(float(amap.data.mean()), ctx.training)
        z_val = transpose(self._embed_tokens(s4, self.conv_val, self.bn_val, ctx, (t, b)), (0, 1, 2, 4, 3))
        c2 = output_scale(rate_a, cfg.hw, cfg.p)
        s_out = self.lif_out.forward(mul(matmul(amap, z_val), c2), ctx)  # [T,B,h,HW,dh] binary

        merged = reshape(transpose(s_out, (0, 1, 2, 4, 3)), (t * b, cfg.d, cfg.height, cfg.width))
        out = ops.batchnorm(self.conv_proj.forward(merged), self.bn_proj, ctx.training)

        if ctx.audit is not None:
            ctx.audit.add_dst_t(f"{self.name}.attn", s_in.data, self.conv_map, self.bn_map, cfg)
            ctx.audit.add_dst(f"{self.name}.value", amap.data, s_in.data, self.conv_val, self.bn_val, cfg)
            ctx.audit.add_conv(f"{self.name}.proj", merged.data, self.conv_proj, self.bn_proj)

        return reshape(out, (t, b, cfg.d, cfg.height, cfg.width))
