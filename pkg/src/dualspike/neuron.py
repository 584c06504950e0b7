"""Leaky integrate-and-fire dynamics with surrogate-gradient spiking.

Discrete update per step, for membrane u, input current I:

    v      = u + (I - (u - u_rest)) / tau      (charge)
    s      = H(v - u_th)                       (fire, H(0) = 1)
    u_next = s * u_rest + (1 - s) * v          (hard reset)

The reset uses a detached spike (reset path carries no gradient); the firing
nonlinearity backpropagates through a surrogate derivative. `smooth=True`
swaps the Heaviside for the surrogate's antiderivative and differentiates the
reset exactly, which makes the whole layer finite-difference checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigError,
    ShapeError,
    SpikeTensor,
    Tensor,
    add,
    detach,
    make_node,
    mul,
    stack_steps,
    sub,
    take_step,
)

SURROGATE_KINDS = ("triangular", "sigmoid-derivative")


@dataclass(frozen=True)
class LIFParams:
    tau: float = 2.0
    u_th: float = 1.0
    u_rest: float = 0.0

    def __post_init__(self):
        if self.tau < 1.0:
            raise ConfigError(f"membrane time constant must be >= 1, got {self.tau}")
        if not self.u_th > self.u_rest:
            raise ConfigError(f"threshold {self.u_th} must exceed resting potential {self.u_rest}")


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "triangular"
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ConfigError(f"unknown surrogate kind {self.kind!r}; expected one of {SURROGATE_KINDS}")
        if self.width <= 0:
            raise ConfigError(f"surrogate width must be positive, got {self.width}")


@dataclass
class NeuronState:
    """Membrane potential carried between steps."""

    u: Tensor


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def surrogate_grad(v, params: LIFParams, spec: SurrogateSpec) -> np.ndarray:
    """Pseudo-derivative of the firing nonlinearity at membrane value v."""
    vd = v.data if isinstance(v, Tensor) else np.asarray(v)
    z = (vd - params.u_th) / spec.width
    if spec.kind == "triangular":
        return np.maximum(0.0, 1.0 - np.abs(z)) / spec.width
    s = _sigmoid(z)
    return s * (1.0 - s) / spec.width


def smooth_step(v, params: LIFParams, spec: SurrogateSpec) -> np.ndarray:
    """Antiderivative of surrogate_grad: the smoothed stand-in for the Heaviside."""
    vd = v.data if isinstance(v, Tensor) else np.asarray(v)
    z = (vd - params.u_th) / spec.width
    if spec.kind == "triangular":
        zc = np.clip(z, -1.0, 1.0)
        return np.where(zc < 0.0, 0.5 * (1.0 + zc) ** 2, 1.0 - 0.5 * (1.0 - zc) ** 2)
    return _sigmoid(z)


def spike(v: Tensor, params: LIFParams, spec: SurrogateSpec, smooth: bool = False) -> Tensor:
    """Thresholding with surrogate backward. Binary unless smooth."""
    if smooth:
        data = smooth_step(v.data, params, spec)
        cls = Tensor
    else:
        data = (v.data >= params.u_th).astype(v.data.dtype)
        cls = SpikeTensor
    vd = v.data

    def bw(g):
        return (g * surrogate_grad(vd, params, spec),)

    return make_node(data, (v,), bw, cls=cls)


def lif_step(
    state: NeuronState,
    current: Tensor,
    params: LIFParams = LIFParams(),
    spec: SurrogateSpec = SurrogateSpec(),
    smooth: bool = False,
):
    """One charge/fire/reset step. Returns (v, spikes, next_state)."""
    u = state.u
    if u.data.shape != current.data.shape:
        raise ShapeError(f"membrane shape {u.data.shape} does not match current shape {current.data.shape}")
    v = add(u, mul(add(sub(current, u), params.u_rest), 1.0 / params.tau))
    s = spike(v, params, spec, smooth=smooth)
    gate = s if smooth else detach(s)
    u_next = add(mul(gate, params.u_rest), mul(sub(1.0, gate), v))
    return v, s, NeuronState(u_next)


def initial_state(shape, dtype, params: LIFParams = LIFParams()) -> NeuronState:
    return NeuronState(Tensor(np.full(shape, params.u_rest, dtype=dtype)))


def sn_forward(
    current: Tensor,
    params: LIFParams = LIFParams(),
    spec: SurrogateSpec = SurrogateSpec(),
    smooth: bool = False,
) -> Tensor:
    """Run LIF over the leading time axis: [T, ...] currents -> [T, ...] spikes.

    Fused into one tape node: the forward stores only membrane values V and
    outputs S, and the backward runs truncated-in-space BPTT in a tight loop.
    Matches the per-step composition of lif_step exactly (tested both ways).
    """
    if current.data.ndim < 1 or current.data.shape[0] == 0:
        raise ShapeError(f"sn_forward needs a non-empty leading time axis, got shape {current.data.shape}")
    xd = current.data
    t_steps = xd.shape[0]
    inv_tau = 1.0 / params.tau
    v_hist = np.empty_like(xd)
    s_out = np.empty_like(xd)
    u = np.full(xd.shape[1:], params.u_rest, dtype=xd.dtype)
    for t in range(t_steps):
        v = u + (xd[t] - u + params.u_rest) * inv_tau
        v_hist[t] = v
        if smooth:
            s = smooth_step(v, params, spec)
        else:
            s = (v >= params.u_th).astype(xd.dtype)
        s_out[t] = s
        u = s * params.u_rest + (1.0 - s) * v

    def bw(g):
        d_current = np.empty_like(xd)
        du = np.zeros(xd.shape[1:], dtype=xd.dtype)
        for t in range(t_steps - 1, -1, -1):
            v = v_hist[t]
            s = s_out[t]
            sg = surrogate_grad(v, params, spec)
            if smooth:
                dv = g[t] * sg + du * ((1.0 - s) + sg * (params.u_rest - v))
            else:
                dv = g[t] * sg + du * (1.0 - s)  # reset gate is detached
            d_current[t] = dv * inv_tau
            du = dv * (1.0 - inv_tau)
        return (d_current,)

    return make_node(s_out, (current,), bw, cls=Tensor if smooth else SpikeTensor)


def sn_forward_stepwise(
    current: Tensor,
    params: LIFParams = LIFParams(),
    spec: SurrogateSpec = SurrogateSpec(),
    smooth: bool = False,
) -> Tensor:
    """Reference path: compose lif_step over the time axis on the tape.

    Same contract as sn_forward; kept as the second route for equivalence
    checks (fused vs. step-composed must agree bit-for-bit in forward and to
    rounding in backward).
    """
    if current.data.ndim < 1 or current.data.shape[0] == 0:
        raise ShapeError(f"sn_forward needs a non-empty leading time axis, got shape {current.data.shape}")
    state = initial_state(current.data.shape[1:], current.data.dtype, params)
    outs = []
    for t in range(current.data.shape[0]):
        _, s, state = lif_step(state, take_step(current, t), params, spec, smooth=smooth)
        outs.append(s)
    return stack_steps(outs)
