"""Parameterised layers, deterministic initialisation and parameter registry."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Portable counter-based generator (Philox) for ``seed`` and an optional sub-stream.

    ``make_rng(seed, epoch, index)`` gives an independent stream per
    ``(epoch, index)``, so draws never depend on consumption order elsewhere.
    """
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(seq))


def trunc_normal(shape, rng: np.random.Generator, std: float = INIT_STD, bound: float = 2.0,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until inside ``+-bound*std``."""
    out = rng.standard_normal(shape, dtype=np.float32).astype(dtype, copy=False)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()), dtype=np.float32)
        bad = np.abs(out) > bound
    out *= np.dtype(dtype).type(std)
    return out


def init_params(shape, kind: str, rng: np.random.Generator | None, dtype=np.float32) -> Tensor:
    """Initial parameter tensor; ``rng=None`` gives zero placeholders (structure only)."""
    if kind in ("conv", "linear"):
        data = trunc_normal(shape, rng, dtype=dtype) if rng is not None else np.zeros(shape, dtype)
    elif kind == "norm_gamma":
        data = np.ones(shape)
    elif kind in ("norm_beta", "zeros"):
        data = np.zeros(shape)
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    return Tensor(data.astype(dtype), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return T.linear(x, w, b)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Length-preserving 1-D convolution of ``[N, 1, L]`` with an odd ``[1, 1, k]`` kernel."""
    if x.ndim != 3 or x.shape[1] != 1 or w.shape[:2] != (1, 1):
        raise ShapeError(f"conv1d expects [N, 1, L] input and [1, 1, k] weight, got {x.shape}, {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    n, _, length = x.shape
    y = T.conv2d(x.reshape(n, 1, 1, length), w.reshape(1, 1, 1, k), bias, padding=(0, (k - 1) // 2))
    return y.reshape(n, 1, length)


class Module:
    """Base container; parameters and child modules are discovered from attributes."""

    training: bool = True

    def __init__(self):
        self.training = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def _own_params(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield name, getattr(self, name)

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        """Dotted name -> parameter, in lexicographic name order."""
        found: dict[str, Tensor] = {}
        self._collect(prefix, found, "params")
        return OrderedDict(sorted(found.items()))

    def named_buffers(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        found: dict[str, np.ndarray] = {}
        self._collect(prefix, found, "buffers")
        return OrderedDict(sorted(found.items()))

    def _collect(self, prefix, found, what):
        own = self._own_params() if what == "params" else self._own_buffers()
        for name, value in own:
            found[prefix + name] = value
        for name, child in self.named_children():
            child._collect(f"{prefix}{name}.", found, what)

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None, groups=1, bias=True,
                 dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if padding is None:
            padding = (kh // 2, kw // 2)
        self.stride, self.padding, self.groups = stride, padding, groups
        self.c_in, self.c_out, self.kernel = c_in, c_out, (kh, kw)
        self.weight = init_params((c_out, c_in // groups, kh, kw), "conv", rng, dtype)
        self.bias = init_params((c_out,), "zeros", rng, dtype) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = init_params((d_out, d_in), "linear", rng, dtype)
        self.bias = init_params((d_out,), "zeros", rng, dtype) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, rng=None, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = init_params((channels,), "norm_gamma", rng, dtype)
        self.bias = init_params((channels,), "norm_beta", rng, dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class LayerNorm(Module):
    """Layer norm over ``axis`` (1 for channel-first maps, -1 for tokens)."""

    def __init__(self, channels, rng=None, axis=-1, eps=1e-6, dtype=np.float32):
        super().__init__()
        self.axis, self.eps = axis, eps
        self.weight = init_params((channels,), "norm_gamma", rng, dtype)
        self.bias = init_params((channels,), "norm_beta", rng, dtype)

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.axis, self.eps)


def to_dtype(module: Module, dtype) -> Module:
    """Cast every parameter and buffer of ``module`` in place."""
    for m in _walk(module):
        for name, value in list(vars(m).items()):
            if isinstance(value, Tensor) and value.requires_grad:
                setattr(m, name, Tensor(value.data.astype(dtype), requires_grad=True))
        for name in getattr(m, "_buffers", ()):
            setattr(m, name, getattr(m, name).astype(dtype))
    return module


def _walk(module: Module) -> Iterator[Module]:
    yield module
    for _, child in module.named_children():
        yield from _walk(child)
