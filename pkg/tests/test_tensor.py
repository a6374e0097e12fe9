import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maxglavit import tensor as T
from maxglavit.gradcheck import _op_cases
from maxglavit.layers import make_rng
from maxglavit.tensor import GradError, ShapeError, Tensor

from conftest import f64


def conv_oracle(x, w, b, stride, pad, groups):
    """Direct six-nested-loop convolution."""
    n, c_in, h, wd = x.shape
    c_out, c_per, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    per_out = c_out // groups
    for i in range(n):
        for o in range(c_out):
            g = o // per_out
            for y in range(ho):
                for x_ in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c_per):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += w[o, ci, dy, dx] * xp[i, g * c_per + ci, y * stride + dy, x_ * stride + dx]
                    out[i, o, y, x_] = acc
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_hand_cases():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    a = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.zeros((4, 2)))).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_matmul_batch_broadcast():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((5, 6))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, np.einsum("bhij,jk->bhik", a, b),
                               atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associativity(m, k, l, n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.standard_normal(s)) for s in ((m, k), (k, l), (l, n)))
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-10, rtol=0)


# ---------------------------------------------------------------- conv2d

def test_conv2d_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv2d_stride2_output_size():
    out = T.conv2d(Tensor(np.zeros((1, 1, 224, 224), np.float32)), Tensor(np.zeros((1, 1, 3, 3), np.float32)),
                   stride=2, padding=1)
    assert out.shape == (1, 1, 112, 112)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, b, 1, 1, 1), atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_conv2d_oracle_property(data):
    groups = data.draw(st.sampled_from([1, 2]))
    c_in = groups * data.draw(st.integers(1, 3))
    c_out = groups * data.draw(st.integers(1, 3))
    h, w = data.draw(st.integers(1, 6)), data.draw(st.integers(1, 6))
    pad = data.draw(st.integers(0, 2))
    kh = data.draw(st.integers(1, min(h + 2 * pad, 4)))
    kw = data.draw(st.integers(1, min(w + 2 * pad, 4)))
    stride = data.draw(st.integers(1, 3))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    x = rng.standard_normal((2, c_in, h, w))
    wt = rng.standard_normal((c_out, c_in // groups, kh, kw))
    b = rng.standard_normal(c_out)
    out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, padding=pad, groups=groups)
    assert out.shape == (2, c_out, (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1)
    np.testing.assert_allclose(out.data, conv_oracle(x, wt, b, stride, pad, groups), atol=1e-12, rtol=0)


def test_conv2d_depthwise_matches_oracle():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((4, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, groups=4)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, None, 2, 1, 4), atol=1e-12, rtol=0)


def test_conv2d_errors():
    with pytest.raises(ShapeError, match="divisible"):
        T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 1, 1))), groups=2)
    with pytest.raises(ShapeError, match="larger than padded input"):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------- activations

def test_gelu_values():
    out = T.gelu(Tensor([0.0, 1.0, 10.0])).data
    assert out[0] == 0.0
    assert abs(out[1] - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-12
    assert abs(out[1] - 0.841345) < 1e-5
    assert abs(out[2] - 10.0) < 1e-6


def test_gelu_matches_math_erf():
    xs = np.linspace(-6, 6, 101)
    want = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in xs]
    np.testing.assert_allclose(T.gelu(Tensor(xs)).data, want, atol=1e-14)


def test_sigmoid_values():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    with np.errstate(over="raise", invalid="raise"):
        sat = T.sigmoid(Tensor(np.array([40.0, -1000.0], np.float32))).data
    assert abs(sat[0] - 1.0) <= np.finfo(np.float32).eps and sat[1] >= 0
    x = np.random.default_rng(5).standard_normal(100) * 10
    np.testing.assert_allclose(T.sigmoid(Tensor(-x)).data, 1 - T.sigmoid(Tensor(x)).data, atol=1e-7)


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(Tensor(np.full((2, 4), 3.0)), axis=-1).data, 0.25, atol=1e-15)
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(2)]), axis=0).data, [1 / 3, 2 / 3], atol=1e-7)
    big = T.softmax(Tensor([1e4, -1e4, 0.0, 1e4]), axis=0).data
    assert np.isfinite(big).all() and abs(big.sum() - 1) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e4), st.integers(0, 2))
def test_softmax_rows_sum_to_one(seed, scale, axis):
    x = np.random.default_rng(seed).uniform(-1, 1, (3, 4, 5)) * scale
    s = T.softmax(Tensor(x), axis=axis).data
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-6)


# ---------------------------------------------------------------- pooling and norms

def test_global_avg_pool():
    x = np.zeros((1, 2, 2, 2))
    x[0, 0] = 7.0
    x[0, 1] = [[1, 2], [3, 4]]
    out = T.global_avg_pool(Tensor(x)).data
    assert out.shape == (1, 2, 1, 1)
    assert out[0, 0, 0, 0] == 7.0 and out[0, 1, 0, 0] == 2.5
    one = np.random.default_rng(0).standard_normal((2, 3, 1, 1))
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(one)).data, one)


def _bn(x, training, rm=None, rv=None, gamma=None, beta=None):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    g = Tensor(np.ones(c) if gamma is None else gamma)
    b = Tensor(np.zeros(c) if beta is None else beta)
    return T.batchnorm2d(Tensor(x), g, b, rm, rv, training, eps=1e-5)


def test_batchnorm_eval_identity():
    x = np.random.default_rng(6).standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(_bn(x, False).data, x / np.sqrt(1 + 1e-5), atol=1e-15)


def test_batchnorm_train_statistics_and_running_update():
    rng = np.random.default_rng(7)
    x = 3 + 2 * rng.standard_normal((4, 3, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    y = _bn(x, True, rm, rv).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = 4 * 25
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-12)


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((2, 2, 3, 3), 5.0)
    y = _bn(x, True, beta=np.array([0.25, -1.0])).data
    np.testing.assert_array_equal(y[:, 0], 0.25)
    np.testing.assert_array_equal(y[:, 1], -1.0)


def test_batchnorm_degenerate_batch():
    with pytest.raises(ShapeError):
        _bn(np.ones((1, 2, 1, 1)), True)


def _ln(x, gamma=None, beta=None):
    c = x.shape[1]
    return T.layernorm_channels(Tensor(x), Tensor(np.ones(c) if gamma is None else gamma),
                                Tensor(np.zeros(c) if beta is None else beta)).data


def test_layernorm_channels():
    rng = np.random.default_rng(8)
    fib = rng.standard_normal(16)
    fib = (fib - fib.mean()) / fib.std()
    x = np.broadcast_to(fib[None, :, None, None], (1, 16, 2, 2)).copy()
    np.testing.assert_allclose(_ln(x), x, atol=1e-6)
    beta = rng.standard_normal(4)
    np.testing.assert_allclose(_ln(np.full((1, 4, 2, 2), 3.0), beta=beta), np.broadcast_to(
        beta[None, :, None, None], (1, 4, 2, 2)), atol=1e-12)
    y = _ln(5 * rng.standard_normal((2, 8, 3, 3)) + 1)
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-5)


# ---------------------------------------------------------------- backward

def test_backward_hand_cases():
    x = Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    x = Tensor(np.ones(4), requires_grad=True)
    T.backward(T.sum(T.add(x, x)))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradError, match="scalar"):
        T.backward(T.mul(x, 2.0))
    with pytest.raises(GradError, match="not on a recorded"):
        T.backward(T.sum(Tensor(np.ones(3))))


def test_computation_record_is_topological():
    rng = np.random.default_rng(9)
    a, b = f64(rng, 3, 3, requires_grad=True), f64(rng, 3, 3, requires_grad=True)
    h = T.gelu(T.matmul(a, b))
    loss = T.sum(T.add(h, T.mul(h, a)))
    order = T.computation_record(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    assert len(pos) == len(order)
    for t in order:
        if t._node is not None:
            for p in t._node.parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(t)]
    assert order[-1] is loss


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert y._node is None and not y.requires_grad


def test_elementwise_shape_policy():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    np.testing.assert_array_equal(T.add(Tensor(np.ones((2, 3))), 1.0).data, 2.0)
    np.testing.assert_array_equal(T.expand(Tensor(np.ones(3)), (2, 3)).data, np.ones((2, 3)))


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        Tensor(np.ones(2, np.float16))


def test_determinism_bit_identical():
    rng = np.random.default_rng(10)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = T.softmax(T.conv2d(Tensor(x), Tensor(w), padding=1), axis=1).data
    b = T.softmax(T.conv2d(Tensor(x), Tensor(w), padding=1), axis=1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- gradient checking

def test_grad_check_sum_of_squares():
    x = f64(np.random.default_rng(11), 10)
    rep = T.grad_check(lambda t: T.sum(T.mul(t, t)), x, sample_count=10, h=1e-5)
    assert rep.max_rel_error <= 1e-9


def test_grad_check_gelu_matmul_chain():
    rng = np.random.default_rng(12)
    w = f64(rng, 4, 3)
    x = f64(rng, 2, 4)
    rep = T.grad_check(lambda t: T.sum(T.gelu(T.matmul(t, w))), x, sample_count=8, h=1e-4)
    assert rep.passed and rep.max_rel_error <= 1e-6


def test_grad_check_constant_function():
    x = f64(np.random.default_rng(13), 5)
    rep = T.grad_check(lambda t: T.sum(T.mul(T.sub(t, t), 0.0)), x, sample_count=5)
    assert all(a == 0 and n == 0 for _, _, a, n, _ in rep.samples)


def test_grad_check_rejects_nondeterminism_and_float32():
    x = f64(np.random.default_rng(14), 3)
    calls = iter(range(1000))
    with pytest.raises(GradError, match="not deterministic"):
        T.grad_check(lambda t: T.sum(T.mul(t, float(next(calls)))), x)
    with pytest.raises(TypeError, match="float64"):
        T.grad_check(lambda t: T.sum(t), Tensor(np.ones(3, np.float32)))


@pytest.mark.parametrize("op", sorted(_op_cases(make_rng(0, 99))))
def test_every_backward_rule_matches_finite_differences(op):
    leaves, fn = _op_cases(make_rng(0, 99))[op]
    rep = T.grad_check_many(fn, leaves, sample_count=64, h=1e-4, tolerance=1e-6, rng=make_rng(0, 7))
    assert rep.passed, rep.summary()


def test_op_cases_cover_every_registered_rule():
    assert set(T.BACKWARD) <= set(_op_cases(make_rng(0, 99)))


def test_corrupted_backward_is_caught(monkeypatch):
    good = T.BACKWARD["gelu"]
    monkeypatch.setitem(T.BACKWARD, "gelu", lambda g, node: tuple(1.01 * v for v in good(g, node)))
    leaves, fn = _op_cases(make_rng(0, 99))["gelu"]
    rep = T.grad_check_many(fn, leaves, sample_count=6, h=1e-4, tolerance=1e-6, rng=make_rng(0, 7))
    assert not rep.passed
