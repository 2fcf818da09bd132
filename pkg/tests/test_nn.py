import numpy as np
import pytest

from obn.errors import DimensionError, TapeError
from obn.gradcheck import CorruptedLinear, LabeledLoss, gradcheck, layer_cases
from obn.nn import (BatchNorm2d, Conv2d, Linear, MaxPool2d, Parameter, ReLU, Sequential, SoftmaxCrossEntropy, Tape,
                    conv2d_backward, conv2d_forward)
from oracles import naive_conv


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 2, 5)])
def test_conv_matches_loop_f64(stride, pad, k):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, k, k))
    y, _ = conv2d_forward(x, w, stride, pad)
    ref = naive_conv(x, w, stride, pad)
    assert y.shape == ref.shape
    assert np.max(np.abs(y - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_conv_floor_semantics_on_even_input():
    # stride 2 over 32 with k=3, pad=1 leaves one unreachable row and column
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    y, cache = conv2d_forward(x, w, 2, 1)
    assert y.shape == (1, 3, 4, 4)
    np.testing.assert_allclose(y, naive_conv(x, w, 2, 1), rtol=1e-12, atol=1e-12)
    gx, _ = conv2d_backward(cache, np.ones_like(y))
    assert gx.shape == x.shape


def test_pointwise_conv_is_channel_matmul():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 3, 3))
    w = rng.standard_normal((5, 4, 1, 1))
    y, cache = conv2d_forward(x, w, 1, 0)
    np.testing.assert_allclose(y, np.einsum("ts,nshw->nthw", w[:, :, 0, 0], x), rtol=1e-13)
    g = rng.standard_normal(y.shape)
    gx, gw = conv2d_backward(cache, g)
    np.testing.assert_allclose(gx, np.einsum("ts,nthw->nshw", w[:, :, 0, 0], g), rtol=1e-12)
    np.testing.assert_allclose(gw[:, :, 0, 0], np.einsum("nthw,nshw->ts", g, x), rtol=1e-12)


def test_dirac_kernel_is_identity():
    x = np.random.default_rng(3).standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y, cache = conv2d_forward(x, w, 1, 1)
    assert np.array_equal(y, x)
    g = np.random.default_rng(4).standard_normal(y.shape)
    gx, _ = conv2d_backward(cache, g)
    np.testing.assert_allclose(gx, g, rtol=0, atol=0)


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        Conv2d(2, 3, 3, weight=Parameter(np.ones((3, 2, 1, 1))))


def test_conv_gradcheck_2x4x5x5():
    rng = np.random.default_rng(5)
    conv = Conv2d(4, 3, 3, rng=rng, dtype=np.float64)
    rep = gradcheck(conv, rng.standard_normal((2, 4, 5, 5)), 1e-6)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("case", range(len(layer_cases(np.random.default_rng(0)))))
def test_every_layer_passes_gradcheck(case):
    name, mod, x = layer_cases(np.random.default_rng(6))[case]
    rep = gradcheck(mod, x, 1e-6)
    assert rep.passed, (name, rep.errors)


def test_linear_gradcheck_is_tight():
    rng = np.random.default_rng(7)
    rep = gradcheck(Linear(6, 3, rng=rng, dtype=np.float64), rng.standard_normal((4, 6)), 1e-8)
    assert rep.passed and rep.worst < 1e-8


def test_corrupted_backward_is_flagged():
    rng = np.random.default_rng(8)
    rep = gradcheck(CorruptedLinear(6, 3, rng=rng, dtype=np.float64), rng.standard_normal((4, 6)), 1e-6)
    assert not rep.passed
    assert set(rep.failures) == {"weight"}


def test_batchnorm_constant_input_gives_shift():
    bn = BatchNorm2d(2, np.float64)
    bn.bias.data[:] = [0.5, -1.0]
    y = bn.forward(np.full((3, 2, 2, 2), 7.0))
    assert np.allclose(y[:, 0], 0.5) and np.allclose(y[:, 1], -1.0)
    assert np.all(np.isfinite(bn.running_var)) and np.all(bn.running_var >= 0)


def test_batchnorm_running_stats_and_eval_mode():
    rng = np.random.default_rng(9)
    bn = BatchNorm2d(3, np.float64)
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    bn.forward(x)
    m = 4 * 25
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    bn.eval()
    y = bn.forward(x)
    ref = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y, ref)


def test_softmax_xent_uniform_logits():
    for c in (2, 10, 100):
        loss = SoftmaxCrossEntropy().forward(np.zeros((3, c)), np.array([0, 1, 1]))
        assert abs(loss - np.log(c)) < 1e-12


def test_softmax_xent_gradcheck_large_logits():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 5)) * 30
    rep = gradcheck(LabeledLoss(SoftmaxCrossEntropy(), np.array([0, 1, 2, 4])), x, 1e-6)
    assert rep.passed


def test_maxpool_floor_shape_and_negative_inputs():
    x = -np.abs(np.random.default_rng(11).standard_normal((1, 2, 8, 8))) - 1
    y = MaxPool2d().forward(x)
    assert y.shape == (1, 2, 4, 4)
    assert np.all(y < 0)  # padding never wins
    assert y[0, 0, 0, 0] == x[0, 0, :2, :2].max()


def test_tape_is_lifo_and_owner_checked():
    t = Tape()
    a, b = ReLU(), ReLU()
    t.push(a, 1)
    t.push(b, 2)
    with pytest.raises(TapeError):
        t.pop(a)
    with pytest.raises(TapeError):
        Tape().pop(a)


def test_sequential_consumes_tape():
    rng = np.random.default_rng(12)
    net = Sequential(Conv2d(2, 3, 3, rng=rng), BatchNorm2d(3), ReLU())
    tape = Tape()
    y = net.forward(rng.standard_normal((2, 2, 4, 4)).astype(np.float32), tape)
    assert len(tape) == 3
    net.backward(np.ones_like(y), tape)
    assert len(tape) == 0


def test_parameters_have_matching_grad_buffers():
    net = Sequential(Conv2d(2, 3, 3), BatchNorm2d(3), ReLU())
    for p in net.parameters():
        assert p.grad.shape == p.data.shape and p.grad.dtype == p.data.dtype
    bn_params = [p for n, p in net.named_parameters() if n.startswith("1.")]
    assert bn_params and not any(p.decay for p in bn_params)


def test_tied_weights_are_deduplicated():
    c1 = Conv2d(2, 2, 3)
    c2 = Conv2d(2, 2, 3, weight=c1.weight)
    assert len(Sequential(c1, c2).parameters()) == 1
