"""Structured ops on the tape: convolution, pooling, batch norm, losses.

Convolution lowers to grouped GEMM. Non-overlapping kernels (1x1 and the
kernel==stride patchify used by token embeddings) go through an im2col that
is a pure reshape; overlapping kernels run one wide GEMM per kernel offset
on strided views, which avoids the kh*kw column blowup and keeps single-core
BLAS efficient on desk-scale machines.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ConfigError,
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    make_node,
    matmul,
)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(f"kernel {kernel} (stride {stride}, padding {padding}) does not fit input of size {size}")
    return out


def _pad_hw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, groups: int):
    """[n,C,H,W] -> columns [n, groups, (C/g)*kh*kw, Ho*Wo]."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cg = c // groups
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.reshape(n, groups, cg, ho * wo)
    elif kh == stride and kw == stride and padding == 0 and h % kh == 0 and w % kw == 0:
        # non-overlapping patchify: pure reshape/transpose
        cols = x.reshape(n, c, ho, kh, wo, kw)
        cols = cols.transpose(0, 1, 3, 5, 2, 4).reshape(n, groups, cg * kh * kw, ho * wo)
    else:
        xp = _pad_hw(x, padding)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, groups, cg * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, padding, groups):
    """Adjoint of _im2col: scatter columns back to [n,C,H,W]."""
    n, c, h, w = xshape
    cg = c // groups
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return cols.reshape(n, c, h, w)
    if kh == stride and kw == stride and padding == 0 and h % kh == 0 and w % kw == 0:
        six = cols.reshape(n, c, kh, kw, ho, wo)
        return six.transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w)
    six = cols.reshape(n, c, kh, kw, ho, wo)
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += six[:, :, di, dj]
    if padding:
        return xp[:, :, padding : hp - padding, padding : wp - padding]
    return xp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution, no bias. x: [N,Cin,H,W], weight: [Cout,Cin/g,kh,kw]."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be [O,C/g,kh,kw], got {weight.data.shape}")
    n, c, h, w = x.data.shape
    o, cg, kh, kw = weight.data.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"channels ({c} in, {o} out) not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg} channels per group, input provides {c // groups} ({c} / {groups})")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if kh == stride and kw == stride and padding == 0 and h % kh == 0 and w % kw == 0:
        return _conv2d_cols(x, weight, stride, padding, groups, ho, wo)
    return _conv2d_offsets(x, weight, stride, padding, groups, ho, wo)


def _conv2d_cols(x: Tensor, weight: Tensor, stride, padding, groups, ho, wo) -> Tensor:
    """Patchify path (kernel == stride, no padding): im2col is a reshape.

    Columns are flipped to [g, ck2, n*L] so each group runs one wide GEMM;
    group-count-batched GEMMs keep the BLAS kernel saturated on one core.
    """
    n, c, h, w = x.data.shape
    o, cg, kh, kw = weight.data.shape
    og = o // groups
    l = ho * wo
    xd, wd = x.data, weight.data
    wg = wd.reshape(groups, og, cg * kh * kw)

    def col_t(src):
        cols, _, _ = _im2col(src, kh, kw, stride, padding, groups)
        return np.ascontiguousarray(cols.transpose(1, 2, 0, 3)).reshape(groups, cg * kh * kw, n * l)

    ct = col_t(xd)
    out = np.ascontiguousarray(np.matmul(wg, ct).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, og, n * l)
        ct_b = col_t(xd)
        dw = np.matmul(gt, ct_b.swapaxes(-1, -2))
        dcols = np.matmul(wg.swapaxes(-1, -2), gt)  # [g, ck2, n*L]
        dcols = np.ascontiguousarray(
            dcols.reshape(groups, cg * kh * kw, n, l).transpose(2, 0, 1, 3)
        )
        dx = _col2im(dcols, (n, c, h, w), kh, kw, stride, padding, groups)
        return (dx, dw.reshape(wd.shape))

    return make_node(out, (x, weight), bw)


def _conv2d_offsets(x: Tensor, weight: Tensor, stride, padding, groups, ho, wo) -> Tensor:
    """Overlapping kernels: one wide GEMM per (group, kernel offset).

    Activations are flipped once to channels-leading [C, N, H, W]; each
    offset then slices a strided window and contracts it against the
    matching kernel tap. Peak extra memory stays near one input-sized
    copy instead of the kh*kw column blowup, and every GEMM has n*Ho*Wo
    columns, which keeps single-core BLAS near peak.
    """
    n, c, h, w = x.data.shape
    o, cg, kh, kw = weight.data.shape
    og = o // groups
    l = ho * wo
    xd, wd = x.data, weight.data
    w6 = wd.reshape(groups, og, cg, kh, kw)
    hp, wp = h + 2 * padding, w + 2 * padding

    def offset_slices(di, dj):
        return slice(di, di + stride * ho, stride), slice(dj, dj + stride * wo, stride)

    def channels_leading():
        xp = _pad_hw(xd, padding)
        return np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(groups, cg, n, hp, wp)

    # contiguous per-offset taps; strided weight views would push matmul
    # off the BLAS kernel onto the slow ufunc loop
    w_off = [np.ascontiguousarray(w6[:, :, :, di, dj]) for di in range(kh) for dj in range(kw)]

    xg = channels_leading()
    acc = np.zeros((groups, og, n * l), dtype=xd.dtype)
    prod = np.empty((og, n * l), dtype=xd.dtype)
    for di in range(kh):
        for dj in range(kw):
            si, sj = offset_slices(di, dj)
            xs = np.ascontiguousarray(xg[:, :, :, si, sj]).reshape(groups, cg, n * l)
            wk = w_off[di * kw + dj]
            for gi in range(groups):
                np.matmul(wk[gi], xs[gi], out=prod)
                acc[gi] += prod
    out = np.ascontiguousarray(acc.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    del xg, acc, prod

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, og, n * l)
        wt_off = [np.ascontiguousarray(wo_.swapaxes(1, 2)) for wo_ in w_off]  # [g, cg, og]
        xg_b = channels_leading()
        dw6 = np.zeros_like(w6)
        gp = np.zeros((groups, cg, n, hp, wp), dtype=xd.dtype)
        dxs = np.empty((groups, cg, n * l), dtype=xd.dtype)
        for di in range(kh):
            for dj in range(kw):
                si, sj = offset_slices(di, dj)
                xs = np.ascontiguousarray(xg_b[:, :, :, si, sj]).reshape(groups, cg, n * l)
                wk_t = wt_off[di * kw + dj]
                for gi in range(groups):
                    dw6[gi, :, :, di, dj] += np.matmul(gt[gi], xs[gi].T)
                    np.matmul(wk_t[gi], gt[gi], out=dxs[gi])
                gp[:, :, :, si, sj] += dxs.reshape(groups, cg, n, ho, wo)
        cropped = gp.reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + w]
        dx = np.ascontiguousarray(cropped.transpose(1, 0, 2, 3))
        return (dx, dw6.reshape(wd.shape))

    return make_node(out, (x, weight), bw)


def maxpool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling over [N,C,H,W]; padded cells never win."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    ho = conv_output_size(h, window, stride, padding)
    wo = conv_output_size(w, window, stride, padding)
    xp = _pad_hw(x.data, padding, value=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.zeros_like(xp)
        for o in range(window * window):
            di, dj = divmod(o, window)
            contrib = g * (idx == o)
            gp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += contrib
        if padding:
            return (gp[:, :, padding : padding + h, padding : padding + w],)
        return (gp,)

    return make_node(out, (x,), bw)


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    Layout contract: channel axis is axis 1; statistics reduce over every
    other axis. Running stats use the biased batch variance, momentum-mixed.
    """

    def __init__(self, name: str, channels: int, dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1):
        if channels < 1:
            raise ConfigError(f"batch norm needs at least one channel, got {channels}")
        self.name = name
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels), dtype=dtype)
        self.beta = Parameter(f"{name}.beta", np.zeros(channels), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self):
        return [self.gamma, self.beta]


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization with the fused backward formula."""
    if x.data.ndim < 2:
        raise ShapeError(f"batchnorm input needs a channel axis, got shape {x.data.shape}")
    if x.data.shape[1] != state.channels:
        raise ShapeError(f"batchnorm expects {state.channels} channels, got input shape {x.data.shape}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, state.channels) + (1,) * (x.data.ndim - 2)
    gamma, beta = state.gamma, state.beta
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu.astype(state.running_mean.dtype)
        state.running_var = (1.0 - m) * state.running_var + m * var.astype(state.running_var.dtype)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        out = gd * xhat + bd
        count = x.data.size // state.channels

        def bw(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gd
            mean_dxhat = dxhat.mean(axis=axes).reshape(bshape)
            mean_dxhat_x = (dxhat * xhat).sum(axis=axes).reshape(bshape) / count
            dx = inv.reshape(bshape) * (dxhat - mean_dxhat - xhat * mean_dxhat_x)
            return (dx, dgamma, dbeta)

        return make_node(out, (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    scale = (gamma.data * inv).reshape(bshape)
    shift = (beta.data - gamma.data * state.running_mean * inv).reshape(bshape)
    out = x.data * scale + shift
    xhat_scale = inv.reshape(bshape)
    rm = state.running_mean.reshape(bshape)

    def bw_eval(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * (x.data - rm) * xhat_scale).sum(axis=axes)
        dx = g * scale
        return (dx, dgamma, dbeta)

    return make_node(out, (x, gamma, beta), bw_eval)


def fold_bn(weight: np.ndarray, state: BatchNormState, training: bool = False):
    """Fold eval-mode batch norm into the preceding conv kernel.

    Returns (folded_kernel, folded_bias). Folding is only defined against
    frozen statistics; a train-mode request violates the contract.
    """
    if training:
        raise ContractError("fold_bn requires eval-mode (frozen) statistics")
    w = np.asarray(weight)
    if w.ndim != 4 or w.shape[0] != state.channels:
        raise ShapeError(f"fold_bn expects kernel [O={state.channels},C,kh,kw], got {w.shape}")
    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    scale = state.gamma.data * inv
    folded = w * scale[:, None, None, None]
    bias = state.beta.data - state.gamma.data * state.running_mean * inv
    return folded, bias


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias). weight: [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows of [N, K] logits; labels are int indices."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits rows {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = -logp[np.arange(n), labels].mean()
    probs = ez / sez

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), bw)
