"""Statistical and numerical verification suites.

Monte-Carlo checks sample the moment law for dual-spike currents (mean 0,
variance rate * fan_in when the linear-map entries are mean-0/var-1), the
post-scale unit-variance property, and the spike-product attention variance.
Deterministic checks cover the token-mapping equivalence between stride-p
convolution and a single matrix product, and finite-difference agreement of
the backward pass through a full attention + feed-forward block.

Every sampler decomposes its draw budget into a fixed number of seed streams,
so results are bit-identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import DSSAConfig, attn_map_scale, dst_scale, output_scale, sdsa_scale
from .config import REGISTRY
from .ffn import GWSFFNConfig
from .layers import RunContext
from .model import DualSpikeBlock, NeuronSpec
from .tensor import ContractError, ShapeError, Tensor, backward, mul, tensor_mean

_N_STREAMS = 16  # fixed decomposition; --jobs never changes results


@dataclass
class MCReport:
    samples: int
    mean: float
    mean_stderr: float
    variance: float
    predicted_mean: float
    predicted_variance: float
    variance_rtol: float = 0.05

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean - self.predicted_mean) <= 3.0 * self.mean_stderr

    @property
    def variance_ok(self) -> bool:
        return abs(self.variance - self.predicted_variance) <= self.variance_rtol * self.predicted_variance

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.variance_ok

    def as_dict(self) -> dict:
        return {
            "samples": self.samples,
            "mean": self.mean,
            "mean_stderr": self.mean_stderr,
            "variance": self.variance,
            "predicted_mean": self.predicted_mean,
            "predicted_variance": self.predicted_variance,
            "mean_ok": self.mean_ok,
            "variance_ok": self.variance_ok,
            "passed": self.passed,
        }


def _stream_rngs(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(_N_STREAMS)]


def _split_draws(total: int):
    base, rem = divmod(total, _N_STREAMS)
    return [base + (1 if i < rem else 0) for i in range(_N_STREAMS)]


def _moments_from_chunks(chunks, predicted_mean, predicted_var, rtol=0.05) -> MCReport:
    entries = np.concatenate([c[0] for c in chunks])
    draw_means = np.concatenate([c[1] for c in chunks])
    return MCReport(
        samples=entries.size,
        mean=float(entries.mean()),
        mean_stderr=float(draw_means.std(ddof=1) / math.sqrt(draw_means.size)),
        variance=float(entries.var()),
        predicted_mean=predicted_mean,
        predicted_variance=predicted_var,
        variance_rtol=rtol,
    )


# -- moment law for dual-spike currents ----------------------------------------


def _dst_chunk(args):
    idx, seed_entropy, draws, f_x, m, p, q, transposed = args
    rng = np.random.default_rng(seed_entropy)
    if draws == 0:
        return idx, np.empty(0), np.empty(0)
    x = (rng.random((draws, p, m)) < f_x).astype(np.float64)
    if transposed:
        z = rng.standard_normal((draws, q, m))  # rows of f(Y); contraction against columns
        cur = np.matmul(x, z.swapaxes(-1, -2))
    else:
        z = rng.standard_normal((draws, m, q))
        cur = np.matmul(x, z)
    return idx, cur.ravel(), cur.mean(axis=(1, 2))


def dst_moments_mc(
    f_x: float, m: int, q: int = 4, samples: int = 100_000, seed: int = 0, jobs: int = 1, transposed: bool = False
) -> MCReport:
    """Sample dual-spike currents and compare moments to (0, f_x * m)."""
    if not 0.0 < f_x < 1.0:
        raise ContractError(f"moment law needs a non-degenerate rate in (0, 1), got {f_x}")
    if m < 1 or q < 1 or samples < 16:
        raise ContractError(f"bad sampling plan: m={m}, q={q}, samples={samples}")
    p = q
    total_draws = max(_N_STREAMS, math.ceil(samples / (p * q)))
    seeds = np.random.SeedSequence(seed).spawn(_N_STREAMS)
    tasks = [(i, s, d, f_x, m, p, q, transposed) for i, (s, d) in enumerate(zip(seeds, _split_draws(total_draws)))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = sorted(pool.map(_dst_chunk, tasks), key=lambda r: r[0])
    else:
        results = [_dst_chunk(t) for t in tasks]
    chunks = [(r[1], r[2]) for r in results]
    return _moments_from_chunks(chunks, 0.0, f_x * m)


def _scaled_chunk(args):
    idx, seed_seq, draws, rate, fan_in, p, q, scale = args
    rng = np.random.default_rng(seed_seq)
    if draws == 0:
        return idx, np.empty(0), np.empty(0)
    x = (rng.random((draws, p, fan_in)) < rate).astype(np.float64)
    z = rng.standard_normal((draws, fan_in, q))
    cur = np.matmul(x, z) * scale
    return idx, cur.ravel(), cur.mean(axis=(1, 2))


def post_scale_variance(rate: float, fan_in: int, samples: int = 100_000, seed: int = 0, jobs: int = 1) -> MCReport:
    """Scaled current variance must land in [0.9, 1.1]."""
    if not 0.0 < rate < 1.0:
        raise ContractError(f"post-scale check needs a rate in (0, 1), got {rate}")
    scale = dst_scale(rate, fan_in)
    p = q = 4
    total_draws = max(_N_STREAMS, math.ceil(samples / (p * q)))
    seeds = np.random.SeedSequence(seed).spawn(_N_STREAMS)
    tasks = [(i, s, d, rate, fan_in, p, q, scale) for i, (s, d) in enumerate(zip(seeds, _split_draws(total_draws)))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = sorted(pool.map(_scaled_chunk, tasks), key=lambda r: r[0])
    else:
        results = [_scaled_chunk(t) for t in tasks]
    chunks = [(r[1], r[2]) for r in results]
    report = _moments_from_chunks(chunks, 0.0, 1.0, rtol=0.1)
    return report


def _sdsa_chunk(args):
    idx, seed_seq, draws, f_q, f_k, hw = args
    rng = np.random.default_rng(seed_seq)
    if draws == 0:
        return idx, np.empty(0), np.empty(0)
    qs = rng.random((draws, hw)) < f_q
    ks = rng.random((draws, hw)) < f_k
    cur = (qs & ks).sum(axis=1).astype(np.float64)
    return idx, cur, cur.copy()


def sdsa_moments_mc(f_q: float, f_k: float, hw: int, samples: int = 100_000, seed: int = 0, jobs: int = 1) -> MCReport:
    """Spike-product attention current: mean HW*fq*fk, variance HW*fq*fk*(1-fq*fk)."""
    for r in (f_q, f_k):
        if not 0.0 < r < 1.0:
            raise ContractError(f"rates must be in (0, 1), got {r}")
    seeds = np.random.SeedSequence(seed).spawn(_N_STREAMS)
    tasks = [(i, s, d, f_q, f_k, hw) for i, (s, d) in enumerate(zip(seeds, _split_draws(max(samples, _N_STREAMS))))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = sorted(pool.map(_sdsa_chunk, tasks), key=lambda r: r[0])
    else:
        results = [_sdsa_chunk(t) for t in tasks]
    chunks = [(r[1], r[2]) for r in results]
    prod = f_q * f_k
    return _moments_from_chunks(chunks, prod * hw, hw * prod * (1.0 - prod))


def sdsa_scaled_variance(f_q: float, f_k: float, hw: int, samples: int = 100_000, seed: int = 0) -> MCReport:
    base = sdsa_moments_mc(f_q, f_k, hw, samples=samples, seed=seed)
    scale = sdsa_scale(f_q, f_k, hw)
    return MCReport(
        samples=base.samples,
        mean=base.mean * scale,
        mean_stderr=base.mean_stderr * scale,
        variance=base.variance * scale * scale,
        predicted_mean=base.predicted_mean * scale,
        predicted_variance=1.0,
        variance_rtol=0.1,
    )


# -- conv / token-matmul equivalence --------------------------------------------


def conv_equiv(inp: np.ndarray, kernel: np.ndarray, stride: int, tolerance: float = 1e-6):
    """Check stride-p, padding-0 conv == patch-token matrix product.

    inp:    [H, W, C_in], kernel: [kh, kw, C_out, C_in], stride == kh == kw.
    Overlapping or padded configurations are out of contract.
    """
    inp = np.asarray(inp, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if inp.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"expected input [H,W,C] and kernel [kh,kw,O,C], got {inp.shape} and {kernel.shape}")
    h, w, c = inp.shape
    kh, kw, c_out, c_in = kernel.shape
    if c != c_in:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {c_in}")
    if not (kh == kw == stride):
        raise ContractError(f"mapping is defined for kernel == stride (non-overlapping), got k={kh}x{kw}, stride={stride}")
    if h % stride or w % stride:
        raise ContractError(f"stride {stride} must tile the {h}x{w} input exactly")

    ho, wo = h // stride, w // stride
    # explicit token construction, channel-major then kernel row/col
    tokens = np.empty((ho * wo, c * kh * kw))
    for oi in range(ho):
        for oj in range(wo):
            patch = inp[oi * stride : (oi + 1) * stride, oj * stride : (oj + 1) * stride, :]
            tokens[oi * wo + oj] = patch.transpose(2, 0, 1).ravel()
    wmat = kernel.transpose(3, 0, 1, 2).reshape(c * kh * kw, c_out)
    linear_side = tokens @ wmat

    x_nchw = Tensor(inp.transpose(2, 0, 1)[None])
    w_ock = Tensor(kernel.transpose(2, 3, 0, 1))
    conv_side = ops.conv2d(x_nchw, w_ock, stride=stride).data[0].reshape(c_out, ho * wo).T

    max_dev = float(np.max(np.abs(conv_side - linear_side))) if linear_side.size else 0.0
    return max_dev <= tolerance, max_dev


# -- finite-difference gradient check --------------------------------------------


@dataclass
class GradcheckReport:
    coords: int
    worst_rel_err: float
    tolerance: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and np.isfinite(self.worst_rel_err)

    def as_dict(self) -> dict:
        return {
            "coords": self.coords,
            "worst_rel_err": self.worst_rel_err,
            "tolerance": self.tolerance,
            "failures": self.failures,
            "passed": self.passed,
        }


def gradcheck(loss_fn, params, coords: int = 120, step: float = 1e-3, tol: float = 1e-3, seed: int = 0) -> GradcheckReport:
    """Compare backward-pass gradients against central finite differences.

    loss_fn runs a fresh forward and returns a scalar Tensor; it must be
    deterministic in the parameter values. Coordinates are sampled across all
    parameters proportionally to size.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError(f"gradcheck requires float64 parameters, {p.name} is {p.data.dtype}")
        p.grad[...] = 0.0
    loss = loss_fn()
    backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(coords, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    failures = []
    for fi in flat_idx:
        pi = int(np.searchsorted(bounds, fi, side="right"))
        local = int(fi - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        flat = p.data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + step
        f_plus = loss_fn().item()
        flat[local] = orig - step
        f_minus = loss_fn().item()
        flat[local] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        an = float(analytic[id(p)].reshape(-1)[local])
        if not (np.isfinite(fd) and np.isfinite(an)):
            failures.append({"param": p.name, "index": local, "fd": fd, "analytic": an, "rel_err": float("inf")})
            continue
        scale = max(abs(fd), abs(an))
        if scale < 1e-9:
            continue
        rel = abs(fd - an) / scale
        worst = max(worst, rel)
        if rel > tol:
            failures.append({"param": p.name, "index": local, "fd": fd, "analytic": an, "rel_err": rel})
    return GradcheckReport(coords=len(flat_idx), worst_rel_err=worst, tolerance=tol, failures=failures)


def build_block_fragment(seed: int = 0, time_steps: int = 2, batch: int = 2):
    """Small attention + FFN block fragment for gradient checking.

    Returns (loss_fn, params). Scales and BN statistics are frozen (eval
    mode, pre-seeded EMAs) so the loss is smooth in the parameters; spiking
    nonlinearities run in smoothed mode.
    """
    rng = np.random.default_rng(seed)
    cfg = DSSAConfig(d=16, height=8, width=8, p=2, heads=2)
    ffn_cfg = GWSFFNConfig(d=16, expansion=2, group_width=16)
    block = DualSpikeBlock("fragment", cfg, ffn_cfg, NeuronSpec(), rng=rng, dtype=np.float64)
    x = rng.standard_normal((time_steps, batch, cfg.d, cfg.height, cfg.width))

    # warm up statistics with a hard-spike training pass, then freeze
    block.forward(Tensor(x), RunContext(training=True))
    params = block.parameters()
    ctx = RunContext(training=False, smooth=True)

    def loss_fn():
        out = block.forward(Tensor(x), ctx)
        return tensor_mean(mul(out, out))

    return loss_fn, params


# -- suites -----------------------------------------------------------------------


def _case(suite: str, case: dict, report_dict: dict, passed: bool) -> dict:
    return {"record": "case", "suite": suite, "case": case, **report_dict, "passed": bool(passed)}


def suite_theorem1(samples: int = 100_000, seed: int = 0, jobs: int = 1, fx=None, m=None):
    fx_grid = [fx] if fx is not None else [0.1, 0.3, 0.5]
    m_grid = [m] if m is not None else [64, 256]
    rows = []
    for f in fx_grid:
        for mm in m_grid:
            for transposed in (False, True):
                rep = dst_moments_mc(f, mm, samples=samples, seed=seed, jobs=jobs, transposed=transposed)
                rows.append(_case("theorem1", {"f_x": f, "m": mm, "transposed": transposed}, rep.as_dict(), rep.passed))
    return rows


def suite_scaling(samples: int = 100_000, seed: int = 0, jobs: int = 1):
    rows = []
    for rate, d in ((0.15, 64), (0.3, 256)):
        rep = post_scale_variance(rate, d, samples=samples, seed=seed, jobs=jobs)
        var_ok = 0.9 <= rep.variance <= 1.1
        rows.append(_case("scaling", {"role": "attn_map", "rate": rate, "fan_in": d,
                                      "scale": attn_map_scale(rate, d)}, rep.as_dict(), var_ok))
    for rate, hw, p in ((0.1, 784, 2), (0.25, 3136, 4)):
        fan = hw // (p * p)
        rep = post_scale_variance(rate, fan, samples=samples, seed=seed + 1, jobs=jobs)
        var_ok = 0.9 <= rep.variance <= 1.1
        rows.append(_case("scaling", {"role": "output", "rate": rate, "hw": hw, "p": p,
                                      "scale": output_scale(rate, hw, p)}, rep.as_dict(), var_ok))
    return rows


def registry_patch_cases():
    """Unique (spatial, p, channels) combos across registry stage entries."""
    cases = set()
    for cfg in REGISTRY.values():
        size = ops.conv_output_size(cfg.input_height, cfg.stem.kernel, cfg.stem.stride, cfg.stem.padding)
        if cfg.stem.pool:
            size = ops.conv_output_size(size, 3, 2, 1)
        for i, st in enumerate(cfg.stages):
            if i > 0:
                size = ops.conv_output_size(size, 3, 2, 1)
            cases.add((size, st.p, st.d))
    return sorted(cases)


def suite_conv_equiv(seed: int = 0):
    rows = []
    rng = np.random.default_rng(seed)
    # reference case: 4x4 input, 2x2 kernel, stride 2
    base_cases = [(4, 2, 3, 5)] + [(size, p, c, c) for size, p, c in registry_patch_cases()]
    for size, p, c_in, c_out in base_cases:
        inp = rng.standard_normal((size, size, c_in))
        kern = rng.standard_normal((p, p, c_out, c_in))
        ok, dev = conv_equiv(inp, kern, stride=p)
        rows.append(_case("conv-equiv", {"size": size, "p": p, "c_in": c_in, "c_out": c_out},
                          {"max_deviation": dev}, ok))
    return rows


def suite_sdsa(samples: int = 100_000, seed: int = 0, jobs: int = 1):
    rows = []
    for f_q, f_k, hw in ((0.5, 0.5, 64), (0.2, 0.4, 196)):
        rep = sdsa_moments_mc(f_q, f_k, hw, samples=samples, seed=seed, jobs=jobs)
        rows.append(_case("sdsa", {"f_q": f_q, "f_k": f_k, "hw": hw, "scaled": False}, rep.as_dict(), rep.passed))
        srep = sdsa_scaled_variance(f_q, f_k, hw, samples=samples, seed=seed)
        var_ok = 0.9 <= srep.variance <= 1.1
        rows.append(_case("sdsa", {"f_q": f_q, "f_k": f_k, "hw": hw, "scaled": True,
                                   "scale": sdsa_scale(f_q, f_k, hw)}, srep.as_dict(), var_ok))
    return rows


def suite_gradcheck(seed: int = 0, coords: int = 120):
    loss_fn, params = build_block_fragment(seed=seed)
    rep = gradcheck(loss_fn, params, coords=coords, seed=seed)
    return [_case("gradcheck", {"coords": coords, "fragment": "attention+ffn"}, rep.as_dict(), rep.passed)]


SUITES = {
    "theorem1": suite_theorem1,
    "scaling": suite_scaling,
    "conv-equiv": lambda samples=0, seed=0, jobs=1: suite_conv_equiv(seed=seed),
    "sdsa": suite_sdsa,
    "gradcheck": lambda samples=0, seed=0, jobs=1: suite_gradcheck(seed=seed),
}


def run_suites(names, samples: int = 100_000, seed: int = 0, jobs: int = 1, fx=None, m=None):
    rows = []
    for name in names:
        if name == "theorem1":
            rows.extend(suite_theorem1(samples=samples, seed=seed, jobs=jobs, fx=fx, m=m))
        elif name in SUITES:
            rows.extend(SUITES[name](samples=samples, seed=seed, jobs=jobs))
        else:
            raise ContractError(f"unknown verification suite {name!r}; have {sorted(SUITES)} or 'all'")
    return rows
