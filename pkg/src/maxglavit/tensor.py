"""Dense tensors with tape-free reverse-mode differentiation.

Every differentiable operation stores a :class:`Node` on its output naming the
operation, its input tensors and whatever intermediates the backward rule
needs. Backward rules live in the module-level ``BACKWARD`` table keyed by
operation name, so a single rule can be swapped out (for example by a test
that wants a deliberately broken gradient).
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "GradError", "BACKWARD", "no_grad", "is_grad_enabled",
    "tensor", "zeros", "ones", "add", "sub", "mul", "div", "neg", "sqrt", "exp", "log",
    "relu", "gelu", "sigmoid", "softmax", "log_softmax", "sum", "mean", "amax",
    "reshape", "transpose", "expand", "concat", "getitem", "matmul", "linear",
    "conv2d", "avg_pool2d", "global_avg_pool", "batchnorm2d", "layer_norm",
    "layernorm_channels", "backward", "computation_record", "grad_check",
    "grad_check_many", "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradError(RuntimeError):
    """Raised when a gradient cannot be computed as requested."""


_FLOAT_TYPES = (np.float32, np.float64)
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class Node:
    op: str
    parents: tuple
    saved: dict = field(default_factory=dict)


class Tensor:
    """N-dimensional real array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            if dtype is not None or np.issubdtype(arr.dtype, np.floating):
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another precision."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


BACKWARD: dict[str, Callable] = {}


def _register(op: str):
    def deco(fn):
        BACKWARD[op] = fn
        return fn
    return deco


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], **saved) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), saved)
    return out


# ---------------------------------------------------------------- elementwise

def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ; use expand() explicitly")
    if a.size == 1 and b.size != 1 and a.ndim > b.ndim:
        raise ShapeError(f"{op}: scalar operand has more dimensions than {b.shape}")
    if b.size == 1 and a.size != 1 and b.ndim > a.ndim:
        raise ShapeError(f"{op}: scalar operand has more dimensions than {a.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _result("add", a.data + b.data, (a, b))


@_register("add")
def _add_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _result("sub", a.data - b.data, (a, b))


@_register("sub")
def _sub_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return _result("mul", a.data * b.data, (a, b))


@_register("mul")
def _mul_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    return _result("div", a.data / b.data, (a, b))


@_register("div")
def _div_bw(g, node):
    a, b = node.parents
    ga = g / b.data
    gb = -g * a.data / (b.data * b.data)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def neg(x: Tensor) -> Tensor:
    return _result("neg", -x.data, (x,))


@_register("neg")
def _neg_bw(g, node):
    return (-g,)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result("sqrt", out, (x,), out=out)


@_register("sqrt")
def _sqrt_bw(g, node):
    out = node.saved["out"]
    safe = np.where(out > 0, out, 1)
    return (np.where(out > 0, 0.5 * g / safe, 0).astype(out.dtype),)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), out=out)


@_register("exp")
def _exp_bw(g, node):
    return (g * node.saved["out"],)


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,))


@_register("log")
def _log_bw(g, node):
    return (g / node.parents[0].data,)


def relu(x: Tensor) -> Tensor:
    return _result("relu", np.maximum(x.data, 0), (x,))


@_register("relu")
def _relu_bw(g, node):
    return (g * (node.parents[0].data > 0),)


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    return _result("gelu", (x.data * cdf).astype(x.dtype), (x,), cdf=cdf)


@_register("gelu")
def _gelu_bw(g, node):
    x = node.parents[0].data
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return ((g * (node.saved["cdf"] + x * pdf)).astype(x.dtype),)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _result("sigmoid", out, (x,), out=out)


@_register("sigmoid")
def _sigmoid_bw(g, node):
    out = node.saved["out"]
    return (g * out * (1 - out),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _result("softmax", out, (x,), out=out, axis=axis)


@_register("softmax")
def _softmax_bw(g, node):
    out, axis = node.saved["out"], node.saved["axis"]
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return _result("log_softmax", out, (x,), out=out, axis=axis)


@_register("log_softmax")
def _log_softmax_bw(g, node):
    out, axis = node.saved["out"], node.saved["axis"]
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    return _result("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,),
                   axes=axes, keepdims=keepdims)


@_register("sum")
def _sum_bw(g, node):
    x = node.parents[0]
    if not node.saved["keepdims"]:
        g = np.expand_dims(g, node.saved["axes"])
    return (np.broadcast_to(g, x.shape).astype(x.dtype),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return _result("mean", np.mean(x.data, axis=axes, keepdims=keepdims), (x,),
                   axes=axes, keepdims=keepdims, count=count)


@_register("mean")
def _mean_bw(g, node):
    x = node.parents[0]
    if not node.saved["keepdims"]:
        g = np.expand_dims(g, node.saved["axes"])
    return ((np.broadcast_to(g, x.shape) / node.saved["count"]).astype(x.dtype),)


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = np.max(x.data, axis=axes, keepdims=True)
    res = out if keepdims else np.squeeze(out, axis=axes)
    return _result("amax", res, (x,), axes=axes, keepdims=keepdims, kept=out)


@_register("amax")
def _amax_bw(g, node):
    x = node.parents[0]
    kept = node.saved["kept"]
    if not node.saved["keepdims"]:
        g = np.expand_dims(g, node.saved["axes"])
    mask = (x.data == kept)
    # ties share the gradient evenly
    count = np.sum(mask, axis=node.saved["axes"], keepdims=True)
    return ((mask * g / count).astype(x.dtype),)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    return _result("reshape", x.data.reshape(shape), (x,))


@_register("reshape")
def _reshape_bw(g, node):
    return (g.reshape(node.parents[0].shape),)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    return _result("transpose", np.transpose(x.data, axes), (x,), axes=axes)


@_register("transpose")
def _transpose_bw(g, node):
    return (np.transpose(g, np.argsort(node.saved["axes"])),)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` following numpy rules; the only implicit broadcast."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    return _result("expand", np.ascontiguousarray(out), (x,))


@_register("expand")
def _expand_bw(g, node):
    shape = node.parents[0].shape
    lead = g.ndim - len(shape)
    g = np.sum(g, axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = np.sum(g, axis=axes, keepdims=True)
    return (g,)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, axis=axis, sizes=sizes)


@_register("concat")
def _concat_bw(g, node):
    bounds = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=node.saved["axis"]))


def getitem(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("tensor indices are not supported")
    return _result("getitem", np.array(x.data[idx]), (x,), idx=idx)


@_register("getitem")
def _getitem_bw(g, node):
    x = node.parents[0]
    full = np.zeros(x.shape, dtype=x.dtype)
    np.add.at(full, node.saved["idx"], g)
    return (full,)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., M, K] @ [.., K, N]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc
    return _result("matmul", np.matmul(a.data, b.data), (a, b))


def _reduce_batch(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = np.sum(g, axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape[:-2]) if s == 1 and g.shape[i] != 1)
    if axes:
        g = np.sum(g, axis=axes, keepdims=True)
    return g


@_register("matmul")
def _matmul_bw(g, node):
    a, b = node.parents
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return (None if ga is None else _reduce_batch(ga, a.shape),
            None if gb is None else _reduce_batch(gb, b.shape))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = np.matmul(x.data, w.data.T)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)
    return _result("linear", out, parents)


@_register("linear")
def _linear_bw(g, node):
    x, w = node.parents[:2]
    g2 = g.reshape(-1, g.shape[-1])
    gx = np.matmul(g, w.data)
    gw = np.matmul(g2.T, x.data.reshape(-1, x.shape[-1]))
    grads = [gx, gw]
    if len(node.parents) == 3:
        grads.append(np.sum(g2, axis=0))
    return tuple(grads)


# ---------------------------------------------------------------- convolution

def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_geometry(x_shape, w_shape, stride, padding, groups):
    n, c_in, h, w_ = x_shape
    c_out, c_per, kh, kw = w_shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_per != c_in // groups:
        raise ShapeError(f"conv2d: weight {w_shape} expects {c_per * groups} input channels, got {c_in}")
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
    if kh > h + 2 * ph or kw > w_ + 2 * pw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w_ + 2 * pw}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w_ + 2 * pw - kw) // sw + 1
    return ho, wo


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """Zero-padded cross-correlation over ``[N, C, H, W]`` inputs.

    ``stride`` and ``padding`` accept an int or an ``(h, w)`` pair. The kernel is
    applied one spatial offset at a time, so the summation order is fixed.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    stride, padding = _as_pair(stride), _as_pair(padding)
    ho, wo = _conv_geometry(x.shape, w.shape, stride, padding, groups)
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {w.shape[0]} output channels")
    xp = _pad(x.data, padding)
    out = _conv_forward(xp, w.data, stride, groups, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, w) if bias is None else (x, w, bias)
    return _result("conv2d", out, parents, stride=stride, padding=padding, groups=groups,
                   out_hw=(ho, wo))


def _pad(a: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _window(xp, i, j, stride, ho, wo):
    sh, sw = stride
    return xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]


def _conv_forward(xp, w, stride, groups, ho, wo):
    n, c_in = xp.shape[:2]
    c_out, c_per, kh, kw = w.shape
    out = np.zeros((n, c_out, ho, wo), dtype=np.result_type(xp, w))
    depthwise = groups == c_in == c_out
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, stride, ho, wo)
            if depthwise:
                out += patch * w[:, 0, i, j][None, :, None, None]
            elif groups == 1:
                out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j], optimize=True)
            else:
                pg = patch.reshape(n, groups, c_per, ho, wo)
                wg = w[:, :, i, j].reshape(groups, c_out // groups, c_per)
                out += np.einsum("ngchw,goc->ngohw", pg, wg, optimize=True).reshape(n, c_out, ho, wo)
    return out


@_register("conv2d")
def _conv2d_bw(g, node):
    x, w = node.parents[:2]
    stride, padding, groups = node.saved["stride"], node.saved["padding"], node.saved["groups"]
    ho, wo = node.saved["out_hw"]
    n, c_in, h, wd = x.shape
    c_out, c_per, kh, kw = w.shape
    xp = _pad(x.data, padding)
    gxp = np.zeros_like(xp) if x.requires_grad else None
    gw = np.zeros_like(w.data)
    depthwise = groups == c_in == c_out
    sh, sw = stride
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
            patch = xp[sl]
            if depthwise:
                gw[:, 0, i, j] = np.sum(g * patch, axis=(0, 2, 3))
                if gxp is not None:
                    gxp[sl] += g * w.data[:, 0, i, j][None, :, None, None]
            elif groups == 1:
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
                if gxp is not None:
                    gxp[sl] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
            else:
                gg = g.reshape(n, groups, c_out // groups, ho, wo)
                pg = patch.reshape(n, groups, c_per, ho, wo)
                gw[:, :, i, j] = np.einsum("ngohw,ngchw->goc", gg, pg, optimize=True).reshape(c_out, c_per)
                if gxp is not None:
                    wg = w.data[:, :, i, j].reshape(groups, c_out // groups, c_per)
                    gxp[sl] += np.einsum("ngohw,goc->ngchw", gg, wg, optimize=True).reshape(n, c_in, ho, wo)
    gx = None
    if gxp is not None:
        ph, pw = padding
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
    grads = [gx, gw]
    if len(node.parents) == 3:
        grads.append(np.sum(g, axis=(0, 2, 3)))
    return tuple(grads)


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping ``kernel x kernel`` average pooling (stride = kernel)."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by kernel {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))
    return _result("avg_pool2d", out, (x,), kernel=kernel)


@_register("avg_pool2d")
def _avg_pool2d_bw(g, node):
    k = node.saved["kernel"]
    gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
    return (gx.astype(g.dtype),)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``[N, C, H, W] -> [N, C, 1, 1]``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------- normalisation

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Batch normalisation over ``(N, H, W)`` per channel.

    In training mode the running buffers are updated in place with an
    exponential moving average (unbiased variance).
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d: training needs at least two values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    return _result("batchnorm2d", out, (x, gamma, beta), xhat=xhat, inv=inv, training=training)


@_register("batchnorm2d")
def _batchnorm2d_bw(g, node):
    x, gamma, _ = node.parents
    xhat, inv = node.saved["xhat"], node.saved["inv"]
    axes = (0, 2, 3)
    dgamma = np.sum(g * xhat, axis=axes)
    dbeta = np.sum(g, axis=axes)
    dxhat = g * gamma.data[None, :, None, None]
    if node.saved["training"]:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        dx = (inv[None, :, None, None] / m) * (
            m * dxhat
            - np.sum(dxhat, axis=axes, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True))
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx, dgamma, dbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise each fiber along ``axis`` then apply a per-feature affine."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return _result("layer_norm", out, (x, gamma, beta), xhat=xhat, inv=inv, axis=axis,
                   bshape=tuple(bshape))


@_register("layer_norm")
def _layer_norm_bw(g, node):
    x, gamma, _ = node.parents
    xhat, inv, axis = node.saved["xhat"], node.saved["inv"], node.saved["axis"]
    other = tuple(i for i in range(x.ndim) if i != axis)
    dgamma = np.sum(g * xhat, axis=other)
    dbeta = np.sum(g, axis=other)
    dxhat = g * gamma.data.reshape(node.saved["bshape"])
    c = x.shape[axis]
    dx = (inv / c) * (c * dxhat - np.sum(dxhat, axis=axis, keepdims=True)
                      - xhat * np.sum(dxhat * xhat, axis=axis, keepdims=True))
    return dx, dgamma, dbeta


def layernorm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer norm over the channel axis of an ``[N, C, H, W]`` map, per position."""
    return layer_norm(x, gamma, beta, axis=1, eps=eps)


# ---------------------------------------------------------------- backward pass

def computation_record(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of recorded tensors reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.parents):
                if id(p) not in seen and (p.requires_grad or p._node is not None):
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every requiring leaf."""
    if loss.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None and not loss.requires_grad:
        raise GradError("loss is not on a recorded computation (nothing requires grad)")
    order = computation_record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            if t.requires_grad:
                t.grad = g.astype(t.dtype) if t.grad is None else t.grad + g
            continue
        parent_grads = BACKWARD[t._node.op](g, t._node)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GradError(f"{t._node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: tuple | None
    samples: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} max_rel_error={self.max_rel_error:.3e} tolerance={self.tolerance:.1e} "
                 f"samples={len(self.samples)}"]
        if self.worst is not None:
            name, idx, a, n_ = self.worst
            lines.append(f"worst {name}{list(idx)} analytic={a:.9e} numeric={n_:.9e}")
        return "\n".join(lines)


def _relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check_many(f: Callable[[], Tensor], params: dict[str, Tensor], sample_count: int = 50,
                    h: float = 1e-4, tolerance: float = 1e-6, rng: np.random.Generator | None = None,
                    ) -> GradCheckReport:
    """Central-difference check of ``f``'s gradient for sampled coordinates of ``params``.

    ``f`` takes no arguments and reads the parameters it closes over; it must be
    deterministic. Coordinates are drawn uniformly over all parameter elements.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors; {name} is {p.dtype}")
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
    names = list(params)
    for p in params.values():
        p.grad = None
    loss = f()
    with no_grad():
        again = f()
    if not np.array_equal(loss.data, again.data):
        raise GradError("function is not deterministic: two evaluations differ")
    backward(loss)

    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    count = min(sample_count, total)
    flat_ids = rng.choice(total, size=count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    samples = []
    worst, worst_err = None, -1.0
    for fid in flat_ids:
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        name = names[k]
        p = params[name]
        local = int(fid - offsets[k])
        idx = tuple(int(i) for i in np.unravel_index(local, p.shape))
        flat = p.data.reshape(-1)
        orig = flat[local]
        with no_grad():
            flat[local] = orig + h
            fp = float(f().data)
            flat[local] = orig - h
            fm = float(f().data)
        flat[local] = orig
        numeric = (fp - fm) / (2 * h)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[local])
        err = _relative_error(analytic, numeric)
        samples.append((name, idx, analytic, numeric, err))
        if err > worst_err:
            worst_err, worst = err, (name, idx, analytic, numeric)
    return GradCheckReport(max(worst_err, 0.0), tolerance, worst, samples)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, sample_count: int = 20, h: float = 1e-5,
               tolerance: float = 1e-6, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Check ``d f(x) / d x`` against central differences at sampled coordinates."""
    x.requires_grad = True
    return grad_check_many(lambda: f(x), {"x": x}, sample_count, h, tolerance, rng)
