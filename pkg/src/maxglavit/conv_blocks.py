"""Local feature blocks used inside a MaxViT stage: MBConv and the ConvNeXt family."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention_modules import SqueezeExcite
from .layers import BatchNorm2d, Conv2d, LayerNorm, Module, init_params
from .tensor import ShapeError, Tensor

BLOCK_VARIANTS = ("mbconv", "convnext", "convnextv2", "inceptionnext")


class MBConv(Module):
    """Pre-norm inverted bottleneck with a squeeze-excitation gate.

    BN -> 1x1 expand -> BN, GELU -> 3x3 depthwise (stride) -> BN, GELU -> SE ->
    1x1 project. The shortcut is the identity when shape is preserved, else
    optional 2x2 average pooling followed by a 1x1 conv.
    """

    def __init__(self, c_in, c_out, rng, stride=1, expansion=4, se_hidden=None, se_reduction=4,
                 dw_kernel=3, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise ShapeError(f"MBConv stride must be 1 or 2, got {stride}")
        mid = expansion * c_in
        self.stride = stride
        self.pre_norm = BatchNorm2d(c_in, dtype=dtype)
        self.expand = Conv2d(c_in, mid, 1, rng, bias=False, dtype=dtype)
        self.norm1 = BatchNorm2d(mid, dtype=dtype)
        self.dw = Conv2d(mid, mid, dw_kernel, rng, stride=stride, groups=mid, bias=False, dtype=dtype)
        self.norm2 = BatchNorm2d(mid, dtype=dtype)
        self.se = SqueezeExcite(mid, rng, reduction=se_reduction, hidden=se_hidden, dtype=dtype)
        self.project = Conv2d(mid, c_out, 1, rng, dtype=dtype)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv2d(c_in, c_out, 1, rng, dtype=dtype)

    def forward(self, x):
        y = self.pre_norm(x)
        y = T.gelu(self.norm1(self.expand(y)))
        y = T.gelu(self.norm2(self.dw(y)))
        y = self.project(self.se(y))
        if self.shortcut is None:
            return T.add(x, y)
        skip = T.avg_pool2d(x, 2) if self.stride == 2 else x
        return T.add(self.shortcut(skip), y)


def grn(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Global response normalisation.

    Per (n, c): spatial L2 norm divided by its mean over channels, applied as
    ``gamma * (x * n) + beta + x``.
    """
    n, c = x.shape[:2]
    energy = T.sqrt(T.sum(T.mul(x, x), axis=(2, 3), keepdims=True))
    avg = T.mean(energy, axis=1, keepdims=True)
    norm = T.div(energy, T.expand(T.add(avg, eps), energy.shape))
    scaled = T.mul(x, T.expand(norm, x.shape))
    g = T.expand(gamma.reshape(1, c, 1, 1), x.shape)
    b = T.expand(beta.reshape(1, c, 1, 1), x.shape)
    return T.add(T.add(T.mul(g, scaled), b), x)


class GRN(Module):
    def __init__(self, channels, rng=None, eps=1e-6, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = init_params((channels,), "zeros", rng, dtype)
        self.beta = init_params((channels,), "zeros", rng, dtype)

    def forward(self, x):
        return grn(x, self.gamma, self.beta, self.eps)


class ConvNeXt(Module):
    """7x7 depthwise -> LN -> 1x1 (4C) -> GELU -> [GRN] -> 1x1 (C) -> [LayerScale] + x.

    ``v2=True`` gives the ConvNeXtV2 block (GRN instead of LayerScale).
    """

    def __init__(self, channels, rng, expansion=4, dw_kernel=7, layerscale_init=1e-6, v2=False,
                 dtype=np.float32):
        super().__init__()
        self.v2 = v2
        self.dw = Conv2d(channels, channels, dw_kernel, rng, groups=channels, dtype=dtype)
        self.norm = LayerNorm(channels, axis=1, dtype=dtype)
        self.pw1 = Conv2d(channels, expansion * channels, 1, rng, dtype=dtype)
        self.pw2 = Conv2d(expansion * channels, channels, 1, rng, dtype=dtype)
        if v2:
            self.grn = GRN(expansion * channels, dtype=dtype)
            self.layerscale = None
        else:
            self.grn = None
            self.layerscale = T.Tensor(np.full(channels, layerscale_init, dtype=dtype), requires_grad=True)

    def forward(self, x):
        y = T.gelu(self.pw1(self.norm(self.dw(x))))
        if self.grn is not None:
            y = self.grn(y)
        y = self.pw2(y)
        if self.layerscale is not None:
            y = T.mul(y, T.expand(self.layerscale.reshape(1, -1, 1, 1), y.shape))
        return T.add(x, y)


class ConvNeXtV2(ConvNeXt):
    def __init__(self, channels, rng, expansion=4, dw_kernel=7, dtype=np.float32):
        super().__init__(channels, rng, expansion, dw_kernel, v2=True, dtype=dtype)


class InceptionDWConv(Module):
    """Split channels into square / 1xK / Kx1 depthwise branches and an identity group."""

    def __init__(self, channels, rng, square_kernel=3, band_kernel=11, branch_ratio=0.125,
                 dtype=np.float32):
        super().__init__()
        if channels % 8:
            raise ShapeError(f"InceptionNeXt needs channels divisible by 8, got {channels}")
        gc = int(channels * branch_ratio)
        self.split = (gc, gc, gc, channels - 3 * gc)
        self.dw_square = Conv2d(gc, gc, square_kernel, rng, groups=gc, dtype=dtype)
        self.dw_w = Conv2d(gc, gc, (1, band_kernel), rng, padding=(0, band_kernel // 2), groups=gc,
                           dtype=dtype)
        self.dw_h = Conv2d(gc, gc, (band_kernel, 1), rng, padding=(band_kernel // 2, 0), groups=gc,
                           dtype=dtype)

    def forward(self, x):
        a, b, c, _ = self.split
        parts = [self.dw_square(x[:, :a]), self.dw_w(x[:, a:a + b]), self.dw_h(x[:, a + b:a + b + c]),
                 x[:, a + b + c:]]
        return T.concat(parts, axis=1)


class InceptionNeXt(Module):
    def __init__(self, channels, rng, expansion=4, dtype=np.float32):
        super().__init__()
        self.mixer = InceptionDWConv(channels, rng, dtype=dtype)
        self.norm = LayerNorm(channels, axis=1, dtype=dtype)
        self.pw1 = Conv2d(channels, expansion * channels, 1, rng, dtype=dtype)
        self.pw2 = Conv2d(expansion * channels, channels, 1, rng, dtype=dtype)

    def forward(self, x):
        y = self.norm(self.mixer(x))
        return T.add(x, self.pw2(T.gelu(self.pw1(y))))


class Downsampled(Module):
    """Stride-2 2x2 conv changing width in front of a natively stride-1 block."""

    def __init__(self, c_in, c_out, stride, make_block, rng, dtype=np.float32):
        super().__init__()
        k = 2 if stride == 2 else 1
        self.down = Conv2d(c_in, c_out, k, rng, stride=stride, padding=0, dtype=dtype)
        self.block = make_block()

    def forward(self, x):
        return self.block(self.down(x))


def build_conv_block(tag, c_in, c_out, stride, rng, dtype=np.float32, **opts) -> Module:
    if stride not in (1, 2):
        raise ShapeError(f"conv block stride must be 1 or 2, got {stride}")
    expansion = opts.get("expansion", 4)
    if tag == "mbconv":
        return MBConv(c_in, c_out, rng, stride=stride, expansion=expansion,
                      se_hidden=opts.get("se_hidden"), se_reduction=opts.get("se_reduction", 4),
                      dtype=dtype)
    if tag == "convnext":
        def make():
            return ConvNeXt(c_out, rng, expansion, layerscale_init=opts.get("layerscale_init", 1e-6),
                            dtype=dtype)
    elif tag == "convnextv2":
        def make():
            return ConvNeXtV2(c_out, rng, expansion, dtype=dtype)
    elif tag == "inceptionnext":
        def make():
            return InceptionNeXt(c_out, rng, expansion, dtype=dtype)
    else:
        raise ValueError(f"unknown conv block variant {tag!r}")
    if stride == 1 and c_in == c_out:
        return make()
    return Downsampled(c_in, c_out, stride, make, rng, dtype=dtype)
