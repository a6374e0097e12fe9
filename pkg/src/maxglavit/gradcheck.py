"""Whole-model and per-operation finite-difference gradient verification."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import conv1d, make_rng
from .model import ModelConfig, build, preset, reduced
from .tensor import Tensor
from .training import cross_entropy

# Narrower stages shrink activations under the 0.02-std init until an absolute
# step of 1e-4 is no longer small relative to them.
GRADCHECK_CHANNELS = (64, 64, 64, 64)


def model_grad_check(config: ModelConfig | str = "maxglavit", samples: int = 50, tolerance: float = 1e-3,
                     h: float = 1e-4, seed: int = 42, batch: int = 2) -> T.GradCheckReport:
    """Check parameter gradients of a reduced float64 instance on a fixed random batch."""
    if isinstance(config, str):
        config = preset(config)
    cfg = reduced(config, channels=GRADCHECK_CHANNELS) if config.input_size > 64 else config
    model = build(cfg, seed=seed, dtype=np.float64)
    rng = make_rng(seed, 1)
    x = Tensor(rng.standard_normal((batch, cfg.input_channels, cfg.input_size, cfg.input_size)))
    y = rng.integers(0, cfg.num_classes, size=batch)
    model.train()
    return T.grad_check_many(lambda: cross_entropy(model(x), y), model.named_parameters(), samples, h,
                             tolerance, make_rng(seed, 2))


def _leaf(rng, shape, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _op_cases(rng):
    """Small float64 probes, one per backward rule; each returns (params, scalar loss fn)."""
    cases = {}

    def case(name, shapes, fn, positive=()):
        leaves = {k: _leaf(rng, s, k in positive) for k, s in shapes.items()}
        w = Tensor(rng.standard_normal(np.shape(fn(**leaves).data)))
        cases[name] = (leaves, lambda: T.sum(T.mul(fn(**leaves), w)))

    case("add", {"a": (3, 4), "b": (3, 4)}, lambda a, b: T.add(a, b))
    case("sub", {"a": (3, 4), "b": (3, 4)}, lambda a, b: T.sub(a, b))
    case("mul", {"a": (3, 4), "b": (3, 4)}, lambda a, b: T.mul(a, b))
    case("div", {"a": (3, 4), "b": (3, 4)}, lambda a, b: T.div(a, b), positive=("b",))
    case("neg", {"a": (5,)}, lambda a: T.neg(a))
    case("sqrt", {"a": (5,)}, lambda a: T.sqrt(a), positive=("a",))
    case("exp", {"a": (5,)}, lambda a: T.exp(a))
    case("log", {"a": (5,)}, lambda a: T.log(a), positive=("a",))
    case("relu", {"a": (6,)}, lambda a: T.relu(a))
    case("gelu", {"a": (6,)}, lambda a: T.gelu(a))
    case("sigmoid", {"a": (6,)}, lambda a: T.sigmoid(a))
    case("softmax", {"a": (2, 5)}, lambda a: T.softmax(a, axis=-1))
    case("log_softmax", {"a": (2, 5)}, lambda a: T.log_softmax(a, axis=-1))
    case("sum", {"a": (2, 3, 4)}, lambda a: T.sum(a, axis=(0, 2)))
    case("mean", {"a": (2, 3, 4)}, lambda a: T.mean(a, axis=1, keepdims=True))
    case("amax", {"a": (2, 3, 4)}, lambda a: T.amax(a, axis=(1, 2)))
    case("reshape", {"a": (2, 6)}, lambda a: T.reshape(a, (3, 4)))
    case("transpose", {"a": (2, 3, 4)}, lambda a: T.transpose(a, (2, 0, 1)))
    case("expand", {"a": (1, 3, 1)}, lambda a: T.expand(a, (2, 3, 4)))
    case("concat", {"a": (2, 3), "b": (2, 2)}, lambda a, b: T.concat([a, b], axis=1))
    case("getitem", {"a": (4, 5)}, lambda a: a[1:3, ::2])
    case("matmul", {"a": (2, 3, 4), "b": (4, 5)}, lambda a, b: T.matmul(a, b))
    case("linear", {"x": (3, 4), "w": (2, 4), "b": (2,)}, lambda x, w, b: T.linear(x, w, b))
    case("conv2d", {"x": (2, 4, 5, 5), "w": (6, 2, 3, 3), "b": (6,)},
         lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1, groups=2))
    case("avg_pool2d", {"x": (1, 2, 4, 4)}, lambda x: T.avg_pool2d(x, 2))
    case("batchnorm2d", {"x": (2, 3, 3, 3), "g": (3,), "b": (3,)},
         lambda x, g, b: T.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True))
    case("layer_norm", {"x": (2, 4, 3), "g": (4,), "b": (4,)}, lambda x, g, b: T.layer_norm(x, g, b, axis=1))
    case("conv1d", {"x": (2, 1, 7), "w": (1, 1, 3)}, lambda x, w: conv1d(x, w))
    return cases


def diagnose_ops(tolerance: float = 1e-6, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per operation on small random probes.

    The step is 1e-4: below that, roundoff in the normalisation probes exceeds 1e-6.
    """
    rng = make_rng(seed, 99)
    errors = {}
    for name, (leaves, fn) in _op_cases(rng).items():
        rep = T.grad_check_many(fn, leaves, sample_count=64, h=1e-4, tolerance=tolerance,
                                rng=make_rng(seed, 7))
        errors[name] = rep.max_rel_error
    return errors
