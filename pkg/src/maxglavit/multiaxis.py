"""Block (window) and grid self-attention over ``[N, C, H, W]`` feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class PartitionInfo:
    n: int
    c: int
    h: int
    w: int
    size: int
    mode: str  # "block" or "grid"


def _check_divisible(h, w, size, what):
    if size < 1 or h % size or w % size:
        raise ShapeError(f"{what}: H={h}, W={w} not divisible by {size}")


def window_partition(x: Tensor, window: int) -> tuple[Tensor, PartitionInfo]:
    """Non-overlapping ``window x window`` tiles as ``[N * nWin, window**2, C]`` tokens."""
    n, c, h, w = x.shape
    _check_divisible(h, w, window, "window_partition")
    p = window
    y = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return y.reshape(n * (h // p) * (w // p), p * p, c), PartitionInfo(n, c, h, w, p, "block")


def grid_partition(x: Tensor, grid: int) -> tuple[Tensor, PartitionInfo]:
    """``grid**2`` dilated partitions; partition (u, v) holds positions ``(a*G + u, b*G + v)``.

    Each partition has ``(H/G) * (W/G)`` tokens spread over the whole map.
    """
    n, c, h, w = x.shape
    _check_divisible(h, w, grid, "grid_partition")
    g = grid
    y = x.reshape(n, c, h // g, g, w // g, g).transpose(0, 3, 5, 2, 4, 1)
    return y.reshape(n * g * g, (h // g) * (w // g), c), PartitionInfo(n, c, h, w, g, "grid")


def partition(x: Tensor, size: int, mode: str):
    return window_partition(x, size) if mode == "block" else grid_partition(x, size)


def partition_reverse(tokens: Tensor, info: PartitionInfo) -> Tensor:
    n, c, h, w, s = info.n, info.c, info.h, info.w, info.size
    if info.mode == "block":
        y = tokens.reshape(n, h // s, w // s, s, s, c).transpose(0, 5, 1, 3, 2, 4)
    else:
        y = tokens.reshape(n, s, s, h // s, w // s, c).transpose(0, 5, 3, 1, 4, 2)
    return y.reshape(n, c, h, w)


window_reverse = partition_reverse
grid_reverse = partition_reverse


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention with a fused QKV projection (no position bias)."""

    def __init__(self, dim, heads, rng, dtype=np.float32):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ShapeError(f"MHSA: dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, tokens: Tensor, return_attention: bool = False):
        b, t, c = tokens.shape
        h, d = self.heads, self.head_dim
        qkv = self.qkv(tokens).reshape(b, t, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.mul(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(d))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, c)
        out = self.proj(out)
        return (out, attn) if return_attention else out


def mhsa(tokens: Tensor, params: MultiHeadSelfAttention) -> Tensor:
    return params(tokens)


class FeedForward(Module):
    def __init__(self, dim, rng, expansion=4, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, expansion * dim, rng, dtype=dtype)
        self.fc2 = Linear(expansion * dim, dim, rng, dtype=dtype)

    def forward(self, tokens):
        return self.fc2(T.gelu(self.fc1(tokens)))


def ffn(tokens: Tensor, params: FeedForward) -> Tensor:
    return params(tokens)


class AttentionUnit(Module):
    """Pre-norm residual attention + FFN over block or grid partitions."""

    def __init__(self, dim, size, mode, rng, head_dim=32, expansion=4, dtype=np.float32):
        super().__init__()
        if mode not in ("block", "grid"):
            raise ValueError(f"mode must be 'block' or 'grid', got {mode!r}")
        if head_dim < 1 or dim % head_dim:
            raise ShapeError(f"channels {dim} not divisible by head_dim {head_dim}")
        self.size, self.mode = size, mode
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, dim // head_dim, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, rng, expansion, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        tokens, info = partition(x, self.size, self.mode)
        tokens = T.add(tokens, self.attn(self.norm1(tokens)))
        tokens = T.add(tokens, self.ffn(self.norm2(tokens)))
        return partition_reverse(tokens, info)


def block_attention_unit(x: Tensor, params: AttentionUnit) -> Tensor:
    return params(x)


def grid_attention_unit(x: Tensor, params: AttentionUnit) -> Tensor:
    return params(x)


def swap_block_axes(x, grid: int):
    """Reorder rows/cols so position ``a*G + u`` moves to ``u*(H/G) + a``.

    Grid partitions of ``x`` become ``H/G``-sized windows of the result.
    Works on numpy arrays and tensors alike.
    """
    n, c, h, w = x.shape
    g = grid
    y = x.reshape(n, c, h // g, g, w // g, g).transpose(0, 1, 3, 2, 5, 4)
    return y.reshape(n, c, h, w)


def unswap_block_axes(x, grid: int):
    n, c, h, w = x.shape
    g = grid
    y = x.reshape(n, c, g, h // g, g, w // g).transpose(0, 1, 3, 2, 5, 4)
    return y.reshape(n, c, h, w)
