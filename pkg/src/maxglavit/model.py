"""MaxViT-style network assembly, presets, layer summary and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention_modules import build_attention, eca_kernel_size
from .conv_blocks import BLOCK_VARIANTS, build_conv_block
from .layers import BatchNorm2d, Conv2d, Linear, Module, make_rng
from .multiaxis import AttentionUnit
from .tensor import ShapeError, Tensor

ATTENTION_VARIANTS = ("none", "se", "eca", "cbam")


class ConfigError(ValueError):
    """A model configuration violates a structural constraint."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match its manifest."""


@dataclass
class ModelConfig:
    input_size: int = 224
    input_channels: int = 3
    stem_channels: int = 64
    stages: list = field(default_factory=lambda: [[2, 32], [2, 64], [2, 128], [2, 256]])
    stem_attention: str = "none"
    block_variant: str = "mbconv"
    window_size: int = 7
    grid_size: int = 7
    head_dim: int = 32
    num_classes: int = 3
    expansion: int = 4
    se_reduction: int = 16
    mbconv_se_reduction: int = 4
    eca_gamma: float = 2.0
    eca_b: float = 1.0
    cbam_reduction: int = 16
    cbam_spatial_kernel: int = 7
    layerscale_init: float = 1e-6

    def stage_resolutions(self) -> list[int]:
        res, out = self.input_size // 2, []
        for _ in self.stages:
            res //= 2
            out.append(res)
        return out

    def validate(self) -> "ModelConfig":
        if len(self.stages) != 4:
            raise ConfigError(f"expected exactly 4 stages, got {len(self.stages)}")
        for i, (b, c) in enumerate(self.stages):
            if b < 1 or c < 1:
                raise ConfigError(f"stage {i + 1}: blocks and channels must be >= 1, got ({b}, {c})")
        if self.stem_attention not in ATTENTION_VARIANTS:
            raise ConfigError(f"unknown stem attention {self.stem_attention!r}")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ConfigError(f"unknown block variant {self.block_variant!r}")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32 "
                              "(stem and four stages each halve the resolution)")
        for i, ((_, c), res) in enumerate(zip(self.stages, self.stage_resolutions())):
            for name, size in (("window_size", self.window_size), ("grid_size", self.grid_size)):
                if res % size:
                    raise ConfigError(f"stage {i + 1}: resolution {res} not divisible by {name}={size}")
            if c % self.head_dim:
                raise ConfigError(f"stage {i + 1}: channels {c} not divisible by head_dim={self.head_dim}")
            if self.block_variant == "inceptionnext" and c % 8:
                raise ConfigError(f"stage {i + 1}: inceptionnext needs channels divisible by 8, got {c}")
        if self.stem_attention in ("se", "cbam"):
            r = self.se_reduction if self.stem_attention == "se" else self.cbam_reduction
            if self.stem_channels % r:
                raise ConfigError(f"stem channels {self.stem_channels} not divisible by reduction {r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.stages = [list(map(int, s)) for s in cfg.stages]
        return cfg


_PRESET_STAGES = {
    "maxvit_scaled": (64, [[2, 32], [2, 64], [2, 128], [2, 256]]),
    "maxvit_tiny": (64, [[2, 64], [2, 128], [5, 256], [2, 512]]),
    "maxvit_small": (64, [[2, 96], [2, 192], [5, 384], [2, 768]]),
    "maxvit_base": (64, [[2, 96], [6, 192], [14, 384], [2, 768]]),
    "maxvit_large": (128, [[2, 128], [6, 256], [14, 512], [2, 1024]]),
}

PRESETS = (*_PRESET_STAGES, "maxglavit", "tiny-test")


def preset(name: str) -> ModelConfig:
    """Named configuration. ``tiny-test`` is a desk-scale MaxGlaViT for 64x64 inputs."""
    if name in _PRESET_STAGES:
        stem, stages = _PRESET_STAGES[name]
        return ModelConfig(stem_channels=stem, stages=[list(s) for s in stages])
    if name == "maxglavit":
        return dataclasses.replace(preset("maxvit_scaled"), stem_attention="eca",
                                   block_variant="convnextv2")
    if name == "tiny-test":
        return ModelConfig(input_size=64, stem_channels=8, stages=[[1, 8], [1, 16], [1, 16], [1, 16]],
                           stem_attention="eca", block_variant="convnextv2", window_size=2,
                           grid_size=2, head_dim=8)
    raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def reduced(config: ModelConfig, input_size=64, stem_channels=8, channels=(8, 16, 16, 16),
            head_dim=8, window=2) -> ModelConfig:
    """Same block/attention variants as ``config`` at desk scale, one block per stage."""
    return dataclasses.replace(config, input_size=input_size, stem_channels=stem_channels,
                               stages=[[1, c] for c in channels], window_size=window,
                               grid_size=window, head_dim=head_dim, se_reduction=4, cbam_reduction=4)


class Stem(Module):
    """conv3x3/2 -> BN -> GELU -> [attn] -> conv3x3/1 -> [attn]."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        c = cfg.stem_channels
        opts = dict(se_reduction=cfg.se_reduction, eca_gamma=cfg.eca_gamma, eca_b=cfg.eca_b,
                    cbam_reduction=cfg.cbam_reduction, cbam_spatial_kernel=cfg.cbam_spatial_kernel)
        self.conv1 = Conv2d(cfg.input_channels, c, 3, rng, stride=2, padding=1, bias=False, dtype=dtype)
        self.norm1 = BatchNorm2d(c, dtype=dtype)
        self.attn1 = build_attention(cfg.stem_attention, c, rng, dtype, **opts)
        self.conv2 = Conv2d(c, c, 3, rng, stride=1, padding=1, dtype=dtype)
        self.attn2 = build_attention(cfg.stem_attention, c, rng, dtype, **opts)

    def forward(self, x):
        x = T.gelu(self.norm1(self.conv1(x)))
        if self.attn1 is not None:
            x = self.attn1(x)
        x = self.conv2(x)
        if self.attn2 is not None:
            x = self.attn2(x)
        return x


class MaxViTBlock(Module):
    """Conv block -> block attention -> grid attention."""

    def __init__(self, c_in, c_out, stride, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        self.conv = build_conv_block(cfg.block_variant, c_in, c_out, stride, rng, dtype,
                                     expansion=cfg.expansion, se_reduction=cfg.mbconv_se_reduction,
                                     layerscale_init=cfg.layerscale_init)
        self.block_attn = AttentionUnit(c_out, cfg.window_size, "block", rng, cfg.head_dim,
                                        cfg.expansion, dtype)
        self.grid_attn = AttentionUnit(c_out, cfg.grid_size, "grid", rng, cfg.head_dim,
                                       cfg.expansion, dtype)

    def forward(self, x):
        return self.grid_attn(self.block_attn(self.conv(x)))


class Stage(Module):
    def __init__(self, c_in, c_out, blocks, cfg, rng, dtype=np.float32):
        super().__init__()
        self.blocks = [MaxViTBlock(c_in if i == 0 else c_out, c_out, 2 if i == 0 else 1, cfg, rng, dtype)
                       for i in range(blocks)]

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


class Head(Module):
    def __init__(self, channels, num_classes, rng, dtype=np.float32):
        super().__init__()
        self.fc = Linear(channels, num_classes, rng, dtype=dtype)

    def forward(self, x):
        n, c = x.shape[:2]
        return self.fc(T.global_avg_pool(x).reshape(n, c))


class Model(Module):
    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.stem = Stem(config, rng, dtype)
        c_prev = config.stem_channels
        self.stages = []
        for b, c in config.stages:
            self.stages.append(Stage(c_prev, c, b, config, rng, dtype))
            c_prev = c
        self.head = Head(c_prev, config.num_classes, rng, dtype)

    def features(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for st in self.stages:
            x = st(x)
        return x

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (self.config.input_channels, s, s):
            raise ShapeError(f"expected input [N, {self.config.input_channels}, {s}, {s}], got {x.shape}")
        return self.head(self.features(x))

    def predict_proba(self, x) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                logits = self.forward(x)
            return T.softmax(logits, axis=-1).data
        finally:
            self.train(was_training)


def build(config: ModelConfig, seed: int = 42, dtype=np.float32, init: bool = True) -> Model:
    """Validate ``config`` and build a model with deterministic initial parameters.

    ``init=False`` skips random initialisation (weights are zero), which is
    enough for structural queries such as :func:`describe`.
    """
    config.validate()
    return Model(config, make_rng(seed) if init else None, dtype)


def forward(model: Model, x) -> Tensor:
    return model(x)


def param_count(model: Module) -> int:
    return model.num_params()


# ---------------------------------------------------------------- describe

@dataclass
class LayerRow:
    name: str
    kind: str
    output_shape: tuple
    params: int


def describe(model: Model) -> list[LayerRow]:
    """One row per top-level unit (stem parts, each block's sub-units, head).

    Output shapes come from a symbolic walk of the configuration, not a forward pass.
    """
    cfg = model.config
    rows: list[LayerRow] = []
    s = cfg.input_size // 2
    c = cfg.stem_channels

    def add(name, module, kind, shape):
        if module is None:
            return
        rows.append(LayerRow(name, kind, shape, module.num_params()))

    stem = model.stem
    add("stem.conv1", stem.conv1, "conv3x3/2", (c, s, s))
    add("stem.norm1", stem.norm1, "batchnorm", (c, s, s))
    add("stem.attn1", stem.attn1, cfg.stem_attention, (c, s, s))
    add("stem.conv2", stem.conv2, "conv3x3/1", (c, s, s))
    add("stem.attn2", stem.attn2, cfg.stem_attention, (c, s, s))
    for si, (stage, (_, ch)) in enumerate(zip(model.stages, cfg.stages)):
        s //= 2
        for bi, blk in enumerate(stage.blocks):
            prefix = f"stages.{si}.blocks.{bi}"
            add(f"{prefix}.conv", blk.conv, cfg.block_variant, (ch, s, s))
            add(f"{prefix}.block_attn", blk.block_attn, f"block_attention(P={cfg.window_size})", (ch, s, s))
            add(f"{prefix}.grid_attn", blk.grid_attn, f"grid_attention(G={cfg.grid_size})", (ch, s, s))
    add("head.fc", model.head, "gap+linear", (cfg.num_classes,))
    return rows


def format_describe(model: Model) -> str:
    rows = describe(model)
    total = sum(r.params for r in rows)
    width = max(len(r.name) for r in rows)
    kwidth = max(len(r.kind) for r in rows)
    lines = [f"{'layer':<{width}}  {'kind':<{kwidth}}  {'output':<14}  {'params':>12}"]
    for r in rows:
        shape = "x".join(map(str, r.output_shape))
        lines.append(f"{r.name:<{width}}  {r.kind:<{kwidth}}  {shape:<14}  {r.params:>12,d}")
    lines.append(f"{'total':<{width}}  {'':<{kwidth}}  {'':<14}  {total:>12,d}")
    return "\n".join(lines)


def eca_param_count(channels: int, gamma=2, b=1) -> int:
    return eca_kernel_size(channels, gamma, b)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MGVTCKPT"
VERSION = 1
_DTYPE_NAMES = {"float32": np.float32, "float64": np.float64}


def model_state(model: Model) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters().items()}
    state.update(model.named_buffers())
    return state


def save_checkpoint(model: Model, path, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write ``model`` (parameters, running statistics, config) and optional extras.

    Layout: magic, u32 version, u64 header length, JSON header, raw
    little-endian tensors in manifest order.
    """
    tensors = dict(model_state(model))
    if extra:
        tensors.update(extra)
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "dtype": model.dtype.name,
                         "tensors": manifest, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint file; returns ``(header, tensors)``."""
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", data[8:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    (hlen,) = struct.unpack("<Q", data[12:20])
    if 20 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = memoryview(data)[20 + hlen:]
    tensors = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        if entry["dtype"] not in _DTYPE_NAMES:
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {entry['dtype']}")
        dtype = np.dtype(_DTYPE_NAMES[entry["dtype"]]).newbyteorder("<")
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if entry["nbytes"] != expected:
            raise CheckpointError(f"{path}: tensor {name} shape {entry['shape']} needs {expected} bytes, "
                                  f"manifest says {entry['nbytes']}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {name}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=dtype).reshape(entry["shape"])
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return header, tensors


def load_checkpoint(path, return_extras: bool = False):
    """Rebuild a model from a checkpoint; every parameter and buffer must match the manifest."""
    header, tensors = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid config in header ({exc})") from exc
    dtype = _DTYPE_NAMES.get(header.get("dtype", "float32"), np.float32)
    model = build(config, dtype=dtype, init=False)
    params = model.named_parameters()
    buffers = model.named_buffers()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, "
                                  f"model expects {p.shape}")
    for name, b in buffers.items():
        if name not in tensors or tensors[name].shape != b.shape:
            raise CheckpointError(f"{path}: buffer {name} missing or misshapen")
    for name, p in params.items():
        p.data = tensors[name].copy()
    for name in buffers:
        owner, attr = _resolve(model, name)
        setattr(owner, attr, tensors[name].copy())
    if not return_extras:
        return model
    known = set(params) | set(buffers)
    extras = {k: v for k, v in tensors.items() if k not in known}
    return model, extras, header.get("meta", {})


def _resolve(model: Module, dotted: str):
    parts = dotted.split(".")
    obj = model
    for part in parts[:-1]:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    return obj, parts[-1]
