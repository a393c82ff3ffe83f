import numpy as np
import pytest

from gradcheck import TOL, check_smooth, randomize
from lusphase.errors import ShapeError, StateError
from lusphase.net.layers import (BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReLU, ResidualSubBlock, Sequential,
                                 Tensor, conv2d_backward, conv2d_forward, cross_entropy, softmax)
from oracles import conv2d_loops, numeric_grad, rel_error

SEEDS = range(20)
F64 = np.float64


def test_tensor_grad_defaults_to_zero():
    t = Tensor(np.ones((2, 3)))
    assert t.shape == (2, 3) and t.grad.shape == (2, 3) and not t.grad.any()
    t.grad += 1
    t.zero_grad()
    assert not t.grad.any()
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), np.ones(4))


def test_conv_matches_loops_small(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    b = rng.standard_normal(1)
    out, _ = conv2d_forward(x, w, b, 1)
    assert np.max(np.abs(out - conv2d_loops(x, w, b, 1))) <= 1e-12


@pytest.mark.parametrize("k,stride,shape", [(1, 1, (2, 3, 4, 5)), (3, 2, (2, 2, 7, 6)),
                                            (5, 2, (1, 2, 6, 6)), (5, 3, (1, 1, 4, 7)),
                                            (7, 1, (1, 1, 3, 3))])
def test_conv_matches_loops(rng, k, stride, shape):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((3, shape[1], k, k))
    b = rng.standard_normal(3)
    out, _ = conv2d_forward(x, w, b, stride)
    ref = conv2d_loops(x, w, b, stride)
    assert out.shape == ref.shape == (shape[0], 3, -(-shape[2] // stride), -(-shape[3] // stride))
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out, _ = conv2d_forward(x, w, np.zeros(3), 1)
    np.testing.assert_array_equal(out, x)


def test_conv_average_of_constant():
    x = np.full((1, 1, 6, 6), 0.4)
    out, _ = conv2d_forward(x, np.full((1, 1, 3, 3), 1 / 9), np.zeros(1), 1)
    np.testing.assert_allclose(out, 0.4, rtol=1e-14)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1), 1)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1), 1)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 3, 3)), np.zeros(1), 1)


def test_conv_backward_needs_cache():
    with pytest.raises(StateError):
        conv2d_backward(np.zeros((1, 1, 2, 2)), None)
    with pytest.raises(StateError):
        ReLU().backward(np.zeros(3))
    with pytest.raises(StateError):
        Linear(2, 2).backward(np.zeros((1, 2)))


def test_conv_zero_upstream(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    out, cache = conv2d_forward(x, rng.standard_normal((4, 3, 3, 3)), np.zeros(4), 2)
    for g in conv2d_backward(np.zeros_like(out), cache):
        assert not g.any()


def test_conv_bias_gradient_is_upstream_sum(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    out, cache = conv2d_forward(x, rng.standard_normal((4, 3, 3, 3)), np.zeros(4), 1)
    up = rng.standard_normal(out.shape)
    _, _, gb = conv2d_backward(up, cache)
    np.testing.assert_allclose(gb, up.sum(axis=(0, 2, 3)), rtol=1e-13)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients_2x3x8x8(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    out, cache = conv2d_forward(x, w, b, 1)
    r = rng.standard_normal(out.shape)
    gx, gw, gb = conv2d_backward(r, cache)

    def f():
        return float(np.sum(conv2d_forward(x, w, b, 1)[0] * r))

    for a, arr in ((gx, x), (gw, w), (gb, b)):
        assert rel_error(a, numeric_grad(f, arr)) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_layer_gradients_random_shapes(seed):
    def make(rng):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        c_in, c_out = (int(v) for v in rng.integers(1, 4, 2))
        h, w = (int(v) for v in rng.integers(3, 8, 2))
        layer = Conv2d(c_in, c_out, k, stride, F64)
        randomize(layer.params(), rng)
        return layer, rng.standard_normal((2, c_in, h, w))

    errs = check_smooth(make, seed)
    assert max(errs.values()) <= TOL, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    def make(rng):
        return ReLU(), rng.standard_normal((3, 2, 4, 4))

    assert max(check_smooth(make, seed).values()) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_pool_gradients(seed):
    def make(rng):
        return GlobalAvgPool(), rng.standard_normal((2, 3, int(rng.integers(1, 6)), int(rng.integers(1, 6))))

    assert max(check_smooth(make, seed).values()) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    def make(rng):
        layer = Linear(int(rng.integers(1, 8)), int(rng.integers(1, 4)), F64)
        randomize(layer.params(), rng)
        return layer, rng.standard_normal((4, layer.weight.shape[1]))

    assert max(check_smooth(make, seed).values()) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_residual_gradients(seed):
    def make(rng):
        stride = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        c_out = c_in if rng.random() < 0.5 else int(rng.integers(1, 4))
        block = ResidualSubBlock(c_in, c_out, int(rng.choice([3, 5])), stride, F64)
        randomize(block.params(), rng, 0.3)
        return block, rng.standard_normal((2, c_in, 6, 6))

    errs = check_smooth(make, seed)
    assert max(errs.values()) <= TOL, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_sequential_gradients(seed):
    def make(rng):
        net = Sequential(("conv", Conv2d(2, 3, 3, 2, F64)), ("relu", ReLU()),
                         ("block", ResidualSubBlock(3, 3, 3, 1, F64)), ("pool", GlobalAvgPool()),
                         ("fc", Linear(3, 2, F64)))
        randomize(net.params(), rng, 0.4)
        return net, rng.standard_normal((2, 2, 8, 8))

    errs = check_smooth(make, seed)
    assert max(errs.values()) <= TOL, errs


def test_kink_detection_redraws():
    # A ReLU input sitting exactly on the kink must not be accepted.
    draws = []

    def make(rng):
        x = np.zeros((1, 1, 1, 1)) if not draws else rng.standard_normal((1, 1, 2, 2))
        draws.append(x)
        return ReLU(), x

    check_smooth(make, 0)
    assert len(draws) == 2


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 2)) * 3
    labels = rng.integers(0, 2, 5)
    _, g = cross_entropy(logits, labels)
    assert rel_error(g, numeric_grad(lambda: cross_entropy(logits, labels)[0], logits)) <= TOL


def test_cross_entropy_values():
    loss, _ = cross_entropy(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
    assert loss == pytest.approx(np.log(2), abs=1e-15)
    loss, _ = cross_entropy(np.array([[1000.0, -1000.0]]), np.array([0]))
    assert loss == 0.0
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((3, 2)), np.array([0, 1]))


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.standard_normal((10, 2)) * 50)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-6
    assert softmax(np.array([[2.0, -1.0]]))[0, 0] == pytest.approx(1 / (1 + np.exp(-3)))


def test_residual_identity_when_zeroed(rng):
    block = ResidualSubBlock(4, 4, 3, 1, F64)
    x = np.abs(rng.standard_normal((2, 4, 6, 6)))
    np.testing.assert_array_equal(block.forward(x), x)


def test_residual_projection_when_zeroed(rng):
    block = ResidualSubBlock(2, 5, 5, 2, F64)
    randomize(block.proj.params(), rng)
    x = rng.standard_normal((1, 2, 7, 7))
    expect = np.maximum(block.proj.forward(x), 0)
    np.testing.assert_array_equal(block.forward(x), expect)


def test_residual_parameter_names():
    assert [n for n, _ in ResidualSubBlock(2, 2, 3, 1).params()] == [
        "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"]
    assert [n for n, _ in ResidualSubBlock(2, 4, 3, 2).params()][-2:] == ["proj.weight", "proj.bias"]


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        Linear(3, 2).forward(np.zeros((1, 4)))


def test_invalid_conv_spec():
    for args in ((1, 1, 2), (1, 1, 3, 0), (0, 1, 3)):
        with pytest.raises(ShapeError):
            Conv2d(*args)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    def make(rng):
        c = int(rng.integers(1, 4))
        bn = BatchNorm2d(c, F64)
        randomize(bn.params(), rng, 1.0)
        bn.running_mean[...] = rng.standard_normal(c)
        bn.running_var[...] = rng.uniform(0.5, 2.0, c)
        bn.set_training(training)
        return bn, rng.standard_normal((int(rng.integers(1, 4)), c, 3, 4)) * 2 + 1

    errs = check_smooth(make, seed)
    assert max(errs.values()) <= TOL, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_residual_batchnorm_gradients(seed):
    def make(rng):
        c_in = int(rng.integers(1, 4))
        block = ResidualSubBlock(c_in, int(rng.integers(1, 4)), 3, int(rng.integers(1, 3)), F64, batch_norm=True)
        randomize(block.params(), rng, 0.5)
        return block, rng.standard_normal((3, c_in, 6, 6))

    errs = check_smooth(make, seed)
    assert max(errs.values()) <= TOL, errs


def test_bias_before_batchnorm_has_no_effect(rng):
    block = ResidualSubBlock(2, 3, 3, 2, F64, batch_norm=True)
    randomize(block.params(), rng, 0.5)
    x = rng.standard_normal((3, 2, 6, 6))
    out = block.forward(x)
    for _, t in block.params():
        t.zero_grad()
    block.backward(rng.standard_normal(out.shape))
    for conv in (block.conv1, block.conv2):
        assert np.max(np.abs(conv.bias.grad)) <= 1e-12
        conv.bias.data += 3.0
    np.testing.assert_allclose(block.forward(x), out, rtol=0, atol=1e-12)


def test_batchnorm_normalizes_batch(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * np.array([1, 5, 0.1])[None, :, None, None] + 7
    out = BatchNorm2d(3, F64).forward(x)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5),
                               rtol=1e-12)


def test_batchnorm_running_statistics(rng):
    bn = BatchNorm2d(2, F64)
    x = rng.standard_normal((3, 2, 4, 4)) + 2
    bn.forward(x)
    m = 3 * 4 * 4
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-12)
    bn.set_training(False)
    before = bn.running_mean.copy()
    out = bn.forward(x)
    assert np.array_equal(bn.running_mean, before)
    expect = (x - before[None, :, None, None]) / np.sqrt(bn.running_var + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_batchnorm_errors():
    with pytest.raises(StateError):
        BatchNorm2d(2).backward(np.zeros((1, 2, 2, 2)))
    with pytest.raises(ShapeError):
        BatchNorm2d(2).forward(np.zeros((1, 3, 2, 2)))


def test_residual_batchnorm_names_and_identity(rng):
    block = ResidualSubBlock(3, 3, 3, 1, batch_norm=True)
    assert [n for n, _ in block.params()] == [
        "conv1.weight", "conv1.bias", "bn1.gamma", "bn1.beta",
        "conv2.weight", "conv2.bias", "bn2.gamma", "bn2.beta"]
    assert [n for n, _ in block.buffers()] == [
        "bn1.running_mean", "bn1.running_var", "bn2.running_mean", "bn2.running_var"]
    x = np.abs(rng.standard_normal((2, 3, 5, 5))).astype(np.float32)
    np.testing.assert_array_equal(block.forward(x), x)


def test_rel_error_definition():
    assert rel_error(np.array([1.0, -2.0]), np.array([1.0, -2.0002])) == pytest.approx(2e-4 / 2.0002)
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    # vanishing gradients fall back to the absolute discrepancy
    assert rel_error(np.array([1e-17]), np.array([3e-12])) == pytest.approx(3e-12)
