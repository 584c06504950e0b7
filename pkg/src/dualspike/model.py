"""Multi-stage spiking vision network assembly and checkpoint I/O.

Feature maps flow between modules as real-valued currents shaped
[T, B, C, H, W]; every module re-spikes its input through its own LIF layer.
Images enter by direct encoding (the same frame repeated at every step) and
leave as per-step logits averaged over the time axis.
"""

from __future__ import annotations

import binascii
import struct
import zlib

import numpy as np

from . import ops
from .attention import DSSAConfig, MultiHeadDualSpikeAttention
from .config import ModelConfig, canonical_model_text, registry_config
from .ffn import GroupWiseFeedForward, GWSFFNConfig
from .layers import Conv2d, Linear, Module, NeuronSpec, RunContext, SpikingNeuron
from .ops import conv_output_size
from .tensor import (
    CheckpointError,
    ConfigError,
    ShapeError,
    Tensor,
    add,
    no_grad,
    reshape,
    tensor_mean,
)


class Stem(Module):
    """Entry conv + BN (+ optional 3x3/2 max pool). Operates on real input."""

    def __init__(self, name, cfg: ModelConfig, *, rng, dtype):
        spec = cfg.stem
        self.conv = Conv2d(
            f"{name}.conv", cfg.in_channels, cfg.stages[0].d, spec.kernel,
            stride=spec.stride, padding=spec.padding, rng=rng, dtype=dtype,
        )
        self.bn = ops.BatchNormState(f"{name}.bn", cfg.stages[0].d, dtype=dtype)
        self.pool = spec.pool
        self.name = name

    def out_size(self, h: int, w: int):
        spec_out = lambda s: conv_output_size(s, self.conv.weight.data.shape[-1], self.conv.stride, self.conv.padding)
        h, w = spec_out(h), spec_out(w)
        if self.pool:
            h = conv_output_size(h, 3, 2, 1)
            w = conv_output_size(w, 3, 2, 1)
        return h, w

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        if ctx.audit is not None:
            ctx.audit.add_stem(self.name, x.data, self.conv, self.bn)
        out = ops.batchnorm(self.conv.forward(x), self.bn, ctx.training)
        if self.pool:
            out = ops.maxpool2d(out, 3, 2, padding=1)
        return out

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def bn_states(self):
        return [self.bn]


class Downsample(Module):
    """Stage transition: SN -> 3x3 stride-2 conv -> BN."""

    def __init__(self, name, d_in, d_out, neuron: NeuronSpec, *, rng, dtype):
        self.name = name
        self.lif = SpikingNeuron(neuron)
        self.conv = Conv2d(f"{name}.conv", d_in, d_out, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.bn = ops.BatchNormState(f"{name}.bn", d_out, dtype=dtype)

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        t, b, c, h, w = x.data.shape
        s = reshape(self.lif.forward(x, ctx), (t * b, c, h, w))
        out = ops.batchnorm(self.conv.forward(s), self.bn, ctx.training)
        if ctx.audit is not None:
            ctx.audit.add_conv(self.name, s.data, self.conv, self.bn)
        ho, wo = out.data.shape[2:]
        return reshape(out, (t, b, out.data.shape[1], ho, wo))

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def bn_states(self):
        return [self.bn]


class Classifier(Module):
    """SN -> global average pool -> FC per step; logits averaged over steps."""

    def __init__(self, name, d_in, num_classes, neuron: NeuronSpec, *, rng, dtype):
        self.name = name
        self.lif = SpikingNeuron(neuron)
        self.fc = Linear(f"{name}.fc", d_in, num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        s = self.lif.forward(x, ctx)
        if ctx.audit is not None:
            ctx.audit.add_linear(self.name, s.data, self.fc)
        pooled = tensor_mean(s, axis=(3, 4))  # [T, B, D]
        logits = self.fc.forward(pooled)  # [T, B, classes]
        return tensor_mean(logits, axis=0)

    def parameters(self):
        return self.fc.parameters()


class DualSpikeBlock(Module):
    """Attention and feed-forward sublayers with residual currents."""

    def __init__(self, name, cfg: DSSAConfig, ffn_cfg: GWSFFNConfig, neuron: NeuronSpec, *, rng, dtype):
        self.name = name
        self.attn = MultiHeadDualSpikeAttention(f"{name}.attn", cfg, neuron, rng=rng, dtype=dtype)
        self.ffn = GroupWiseFeedForward(f"{name}.ffn", ffn_cfg, neuron, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        y = add(self.attn.forward(x, ctx), x)
        return add(self.ffn.forward(y, ctx), y)

    def parameters(self):
        return self.attn.parameters() + self.ffn.parameters()

    def bn_states(self):
        return self.attn.bn_states() + self.ffn.bn_states()

    def rate_emas(self):
        return self.attn.rate_emas()


class DualSpikeNet(Module):
    def __init__(self, cfg: ModelConfig, *, dtype=np.float32, seed: int = 0):
        self.config = cfg
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ConfigError(f"model dtype must be float32 or float64, got {self.dtype}")
        rng = np.random.default_rng(seed)
        neuron = NeuronSpec(lif=cfg.lif, surrogate=cfg.surrogate)
        self.neuron = neuron

        self.stem = Stem("stem", cfg, rng=rng, dtype=dtype)
        h, w = self.stem.out_size(cfg.input_height, cfg.input_width)
        self.stage_sizes = []
        self.stages = []
        self.downsamples = []
        for i, spec in enumerate(cfg.stages):
            if i > 0:
                prev = cfg.stages[i - 1]
                self.downsamples.append(
                    Downsample(f"stage{i + 1}.down", prev.d, spec.d, neuron, rng=rng, dtype=dtype)
                )
                h = conv_output_size(h, 3, 2, 1)
                w = conv_output_size(w, 3, 2, 1)
            if h % spec.p or w % spec.p:
                raise ConfigError(
                    f"stage {i + 1}: patch size p={spec.p} must divide the {h}x{w} feature map"
                )
            self.stage_sizes.append((h, w))
            attn_cfg = DSSAConfig(d=spec.d, height=h, width=w, p=spec.p, heads=spec.heads)
            ffn_cfg = GWSFFNConfig(d=spec.d, expansion=spec.expansion, group_width=spec.group_width)
            blocks = [
                DualSpikeBlock(f"stage{i + 1}.block{j}", attn_cfg, ffn_cfg, neuron, rng=rng, dtype=dtype)
                for j in range(spec.blocks)
            ]
            self.stages.append(blocks)
        self.classifier = Classifier("classifier", cfg.stages[-1].d, cfg.num_classes, neuron, rng=rng, dtype=dtype)
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigError("parameter names are not unique")

    # -- structure ------------------------------------------------------

    def modules(self):
        out = [self.stem]
        for i, blocks in enumerate(self.stages):
            if i > 0:
                out.append(self.downsamples[i - 1])
            out.extend(blocks)
        out.append(self.classifier)
        return out

    def parameters(self):
        params = []
        for m in self.modules():
            params.extend(m.parameters())
        return params

    def bn_states(self):
        states = []
        for m in self.modules():
            states.extend(m.bn_states())
        return states

    def rate_emas(self):
        emas = []
        for blocks in self.stages:
            for b in blocks:
                emas.extend(b.rate_emas())
        return emas

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def param_table(self):
        """Per-parameter size listing, construction order."""
        return [(p.name, int(p.data.size)) for p in self.parameters()]

    # -- forward ---------------------------------------------------------

    def encode(self, images: np.ndarray) -> Tensor:
        """Direct encoding: replicate each frame across the time axis."""
        arr = np.asarray(images, dtype=self.dtype)
        if arr.ndim != 4:
            raise ShapeError(f"expected images [B,C,H,W], got {arr.shape}")
        cfg = self.config
        if arr.shape[1:] != (cfg.in_channels, cfg.input_height, cfg.input_width):
            raise ShapeError(
                f"expected images [B,{cfg.in_channels},{cfg.input_height},{cfg.input_width}], got {arr.shape}"
            )
        tiled = np.broadcast_to(arr[None], (cfg.time_steps,) + arr.shape)
        return Tensor(np.ascontiguousarray(tiled))

    def forward(self, images, ctx: RunContext | None = None) -> Tensor:
        ctx = ctx or RunContext()
        x = images if isinstance(images, Tensor) else self.encode(images)
        t, b = x.data.shape[:2]
        flat = reshape(x, (t * b,) + x.data.shape[2:])
        stem_out = self.stem.forward(flat, ctx)
        h, w = stem_out.data.shape[2:]
        cur = reshape(stem_out, (t, b, stem_out.data.shape[1], h, w))
        for i, blocks in enumerate(self.stages):
            if i > 0:
                cur = self.downsamples[i - 1].forward(cur, ctx)
            for block in blocks:
                cur = block.forward(cur, ctx)
        return self.classifier.forward(cur, ctx)

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        """Class predictions without tape recording."""
        images = np.asarray(images)
        outs = []
        with no_grad():
            for i in range(0, images.shape[0], batch_size):
                logits = self.forward(images[i : i + batch_size], RunContext(training=False))
                outs.append(np.argmax(logits.data, axis=1))
        return np.concatenate(outs) if outs else np.empty(0, dtype=np.int64)

    # -- state -----------------------------------------------------------

    def state_tensors(self):
        """Ordered name -> ndarray of everything persisted except EMAs."""
        entries = []
        for p in self.parameters():
            entries.append((p.name, p.data))
        for s in self.bn_states():
            entries.append((f"{s.name}.running_mean", s.running_mean))
            entries.append((f"{s.name}.running_var", s.running_var))
        return entries

    def load_state(self, tensors: dict, emas: dict):
        own = {name: arr for name, arr in self.state_tensors()}
        if set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise CheckpointError(f"state name mismatch: missing={missing[:4]}, unexpected={extra[:4]}")
        for p in self.parameters():
            src = tensors[p.name]
            if src.shape != p.data.shape:
                raise CheckpointError(f"tensor {p.name}: shape {src.shape} != expected {p.data.shape}")
            p.data = src.astype(self.dtype, copy=True)
            p.grad = np.zeros_like(p.data)
        for s in self.bn_states():
            s.running_mean = tensors[f"{s.name}.running_mean"].astype(s.running_mean.dtype, copy=True)
            s.running_var = tensors[f"{s.name}.running_var"].astype(s.running_var.dtype, copy=True)
        model_emas = {e.name: e for e in self.rate_emas()}
        if set(model_emas) != set(emas):
            missing = sorted(set(model_emas) - set(emas))
            raise CheckpointError(f"checkpoint lacks firing-rate EMA entries: {missing[:6]}")
        for name, (initialized, value) in emas.items():
            est = model_emas[name]
            est.initialized = bool(initialized)
            est.value = float(value)


def build(cfg_or_arch, *, dtype=np.float32, seed: int = 0) -> DualSpikeNet:
    cfg = registry_config(cfg_or_arch) if isinstance(cfg_or_arch, str) else cfg_or_arch
    return DualSpikeNet(cfg, dtype=dtype, seed=seed)


# -- checkpoint format ---------------------------------------------------------

_MAGIC = b"DSKC"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long: {name[:32]}...")
    return struct.pack("<H", len(raw)) + raw


def serialize_checkpoint(model: DualSpikeNet) -> bytes:
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    cfg_text = canonical_model_text(model.config).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg_text)))
    parts.append(cfg_text)

    tensors = model.state_tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        dt = np.dtype(arr.dtype)
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name}: unsupported dtype {dt}")
        parts.append(_pack_name(name))
        parts.append(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(np.ascontiguousarray(arr).astype(dt.newbyteorder("<"), copy=False).tobytes())

    emas = model.rate_emas()
    parts.append(struct.pack("<I", len(emas)))
    for e in emas:
        parts.append(_pack_name(e.name))
        parts.append(struct.pack("<Bd", 1 if e.initialized else 0, e.value))

    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: DualSpikeNet, path):
    blob = serialize_checkpoint(model)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        n = struct.unpack("<H", self.take(2))[0]
        return self.take(n).decode("utf-8")


def read_checkpoint(path):
    """Returns (config_text, tensors dict, emas dict). Verifies integrity."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if (zlib.crc32(body) & 0xFFFFFFFF) != crc_stored:
        raise CheckpointError(
            f"checkpoint corrupt: crc32 {crc_stored:#010x} does not match {binascii.crc32(body):#010x}"
        )
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {_VERSION})")
    cfg_text = r.take(r.u32()).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name = r.name()
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        dt = _TAG_DTYPES[tag].newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(_TAG_DTYPES[tag])
    emas = {}
    for _ in range(r.u32()):
        name = r.name()
        initialized, value = struct.unpack("<Bd", r.take(9))
        emas[name] = (bool(initialized), value)
    if r.pos != len(body):
        raise CheckpointError(f"checkpoint has {len(body) - r.pos} trailing bytes")
    return cfg_text, tensors, emas


def load_checkpoint(path, cfg: ModelConfig | None = None, *, dtype=np.float32) -> DualSpikeNet:
    """Rebuild a model from a checkpoint; `cfg`, when given, must match the echo."""
    cfg_text, tensors, emas = read_checkpoint(path)
    if cfg is not None:
        expected = canonical_model_text(cfg)
        if cfg_text != expected:
            raise CheckpointError("checkpoint config echo does not match the requested build")
        target = cfg
    else:
        from .config import model_config_from_values, parse_config_text

        target = model_config_from_values(parse_config_text(cfg_text))
    model = DualSpikeNet(target, dtype=dtype, seed=0)
    model.load_state(tensors, emas)
    return model
