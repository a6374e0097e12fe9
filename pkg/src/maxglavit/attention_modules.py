"""Channel and spatial gating modules: squeeze-excitation, ECA and CBAM."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, Module, conv1d, init_params
from .tensor import ShapeError, Tensor


def _gate_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``[N, C, H, W]`` by a per-channel gate ``s`` of shape ``[N, C]``."""
    n, c = x.shape[:2]
    return T.mul(x, T.expand(s.reshape(n, c, 1, 1), x.shape))


class SqueezeExcite(Module):
    """GAP -> FC(C -> C/r) -> ReLU -> FC(C/r -> C) -> sigmoid gate.

    ``hidden`` overrides the bottleneck width ``C // r`` when given.
    """

    def __init__(self, channels, rng, reduction=16, hidden=None, dtype=np.float32):
        super().__init__()
        if hidden is None:
            if reduction < 1 or channels % reduction:
                raise ShapeError(f"SE: {channels} channels not divisible by reduction {reduction}")
            hidden = channels // reduction
        self.channels, self.hidden = channels, hidden
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        pooled = T.global_avg_pool(x).reshape(n, c)
        return T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))

    def forward(self, x):
        return _gate_channels(x, self.gate(x))


def eca_kernel_size(channels: int, gamma: float = 2, b: float = 1) -> int:
    t = int(abs(math.log2(channels) / gamma + b / gamma))
    return t if t % 2 else t + 1


class ECA(Module):
    """Efficient channel attention: 1-D conv across the pooled channel vector."""

    def __init__(self, channels, rng, gamma=2, b=1, kernel_size=None, bias=False, dtype=np.float32):
        super().__init__()
        k = kernel_size if kernel_size is not None else eca_kernel_size(channels, gamma, b)
        if k % 2 == 0:
            raise ShapeError(f"ECA kernel size must be odd, got {k}")
        self.kernel_size = k
        self.weight = init_params((1, 1, k), "conv", rng, dtype)
        self.bias = init_params((1,), "zeros", rng, dtype) if bias else None

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        pooled = T.global_avg_pool(x).reshape(n, 1, c)
        return T.sigmoid(conv1d(pooled, self.weight, self.bias)).reshape(n, c)

    def forward(self, x):
        return _gate_channels(x, self.gate(x))


class CBAM(Module):
    """Channel gate from avg+max pooled descriptors, then a spatial gate."""

    def __init__(self, channels, rng, reduction=16, spatial_kernel=7, dtype=np.float32):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ShapeError(f"CBAM: {channels} channels not divisible by reduction {reduction}")
        if spatial_kernel % 2 == 0:
            raise ShapeError(f"CBAM spatial kernel must be odd, got {spatial_kernel}")
        self.fc1 = Linear(channels, channels // reduction, rng, dtype=dtype)
        self.fc2 = Linear(channels // reduction, channels, rng, dtype=dtype)
        self.spatial = Conv2d(2, 1, spatial_kernel, rng, padding=spatial_kernel // 2, dtype=dtype)

    def _mlp(self, v):
        return self.fc2(T.relu(self.fc1(v)))

    def channel_gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        avg = T.mean(x, axis=(2, 3)).reshape(n, c)
        mx = T.amax(x, axis=(2, 3)).reshape(n, c)
        return T.sigmoid(T.add(self._mlp(avg), self._mlp(mx)))

    def spatial_gate(self, x: Tensor) -> Tensor:
        """``[N, 1, H, W]`` gate from channel-wise mean and max maps."""
        desc = T.concat([T.mean(x, axis=1, keepdims=True), T.amax(x, axis=1, keepdims=True)], axis=1)
        return T.sigmoid(self.spatial(desc))

    def forward(self, x):
        x = _gate_channels(x, self.channel_gate(x))
        return T.mul(x, T.expand(self.spatial_gate(x), x.shape))


def build_attention(tag: str, channels: int, rng, dtype=np.float32, **opts) -> Module | None:
    if tag in (None, "none"):
        return None
    if tag == "se":
        return SqueezeExcite(channels, rng, reduction=opts.get("se_reduction", 16), dtype=dtype)
    if tag == "eca":
        return ECA(channels, rng, opts.get("eca_gamma", 2), opts.get("eca_b", 1),
                   kernel_size=opts.get("eca_kernel"), dtype=dtype)
    if tag == "cbam":
        return CBAM(channels, rng, opts.get("cbam_reduction", 16), opts.get("cbam_spatial_kernel", 7),
                    dtype=dtype)
    raise ValueError(f"unknown attention variant {tag!r}")
