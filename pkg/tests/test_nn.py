"""Layer tests: convolution layer, batch norm, CBR and BAM."""

import numpy as np
import pytest

from icanet import tensor as T
from icanet.nn import BAM, CBR, BatchNorm2d, Conv2d
from icanet.tensor import ShapeError, Tensor

from conftest import conv2d_loop


def leaf(arr):
    return Tensor(arr, requires_grad=True)


def probe_sum(out, seed=3):
    p = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(out * Tensor(p))


def check_params(module, x, f, tol, h=1e-5):
    """grad_check over every parameter of ``module`` (plus ``x`` if it
    requires grad); returns the worst error."""
    worst = 0.0
    targets = [t for _, t in module.named_parameters()]
    if x.requires_grad:
        targets.append(x)
    for t in targets:
        worst = max(worst, T.grad_check(lambda _: f(), t, h=h, max_coords=12))
    return worst


class TestConvLayer:
    def test_identity_1x1(self, rng):
        layer = Conv2d(3, 3, 1)
        layer.weight.data = np.eye(3).reshape(3, 3, 1, 1).astype(layer.weight.dtype)
        layer.bias.data[:] = 0
        x = rng.random((2, 3, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_dilated_preserves_extent(self):
        layer = Conv2d(1, 2, 3, dilation=2)
        assert layer.padding == 2
        assert layer(Tensor(np.zeros((1, 1, 8, 8)))).shape == (1, 2, 8, 8)

    def test_matches_oracle(self, wide, rng):
        layer = Conv2d(3, 4, 5, np.random.default_rng(1), dilation=2)
        x = rng.normal(size=(2, 3, 9, 9))
        out = layer(Tensor(x)).data
        ref = conv2d_loop(x, layer.weight.data, layer.bias.data, 1, layer.padding, 2)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_even_kernel_needs_padding(self):
        with pytest.raises(ValueError):
            Conv2d(1, 1, 2)

    @pytest.mark.parametrize("k,d", [(1, 1), (3, 1), (3, 4), (5, 3), (7, 2)])
    def test_stride1_preserves_shape(self, rng, k, d):
        h, w = rng.integers(4, 12, size=2)
        assert Conv2d(2, 3, k, dilation=d)(Tensor(np.zeros((1, 2, h, w)))).shape == (1, 3, h, w)


class TestBatchNorm:
    def test_eval_identity(self, rng):
        bn = BatchNorm2d(3).eval()
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        out = bn(Tensor(x)).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-6)

    def test_eval_idempotent_with_unit_stats(self, wide, rng):
        bn = BatchNorm2d(2, eps=1e-300).eval()
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        np.testing.assert_array_equal(bn(bn(x)).data, bn(x).data)

    def test_train_statistics(self, wide, rng):
        bn = BatchNorm2d(3)
        out = bn(Tensor(rng.normal(5, 3, (4, 3, 6, 6)))).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_running_var_nonnegative(self, rng):
        bn = BatchNorm2d(2)
        for _ in range(5):
            bn(Tensor(rng.normal(size=(2, 2, 3, 3))))
        assert (bn.running_var.data >= 0).all()

    def test_defaults(self):
        bn = BatchNorm2d(1)
        assert (bn.eps, bn.momentum) == (1e-5, 0.1)
        with pytest.raises(ValueError):
            BatchNorm2d(1, eps=0)

    def test_single_sample_train(self):
        with pytest.raises(ShapeError):
            BatchNorm2d(2)(Tensor(np.zeros((1, 2, 1, 1))))

    def test_gradients(self, wide, rng):
        bn = BatchNorm2d(3)
        bn.gamma.data = rng.uniform(0.5, 1.5, 3)
        bn.beta.data = rng.normal(size=3)
        x = leaf(rng.normal(size=(2, 3, 4, 4)))
        assert check_params(bn, x, lambda: probe_sum(bn(x)), 1e-4) < 1e-4


class TestCBR:
    def test_nonnegative_and_channels(self, rng):
        cbr = CBR(5, 7, 3, np.random.default_rng(0))
        out = cbr(Tensor(rng.normal(size=(2, 5, 6, 6)))).data
        assert out.shape == (2, 7, 6, 6) and (out >= 0).all()

    def test_conv_has_no_bias(self):
        assert CBR(2, 2, 1, np.random.default_rng(0)).conv.bias is None

    def test_gradients(self, wide, rng):
        cbr = CBR(2, 3, 3, np.random.default_rng(0), dilation=2)
        x = leaf(rng.normal(size=(2, 2, 5, 5)))
        assert check_params(cbr, x, lambda: probe_sum(cbr(x)), 1e-3) < 1e-3


class TestBAM:
    def test_attention_range_and_shape(self, rng):
        bam = BAM(8, np.random.default_rng(0))
        x = Tensor(rng.normal(size=(2, 8, 6, 6)))
        att = bam.attention(x).data
        assert att.shape == x.shape
        assert (att > 0).all() and (att < 1).all()

    def test_gating_bound(self, rng):
        bam = BAM(8, np.random.default_rng(0))
        x = rng.normal(size=(2, 8, 5, 5))
        out = bam(Tensor(x)).data
        assert (np.abs(out) <= np.abs(x.astype(out.dtype))).all()

    def test_zero_weights_half_gate(self, rng):
        bam = BAM(8, np.random.default_rng(0))
        for _, p in bam.named_parameters():
            p.data[...] = 0
        x = rng.normal(size=(2, 8, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(bam(Tensor(x)).data, 0.5 * x)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            BAM(8, np.random.default_rng(0))(Tensor(np.zeros((1, 4, 4, 4))))

    def test_too_few_channels(self):
        with pytest.raises(ValueError):
            BAM(3, np.random.default_rng(0))

    def test_gradients_single_image_eval(self, wide, rng):
        bam = BAM(8, np.random.default_rng(0)).eval()
        for name, t in bam.named_tensors():
            if name.endswith("running_mean"):
                t.data = rng.normal(size=t.shape)
            elif name.endswith("running_var"):
                t.data = rng.uniform(0.5, 2.0, t.shape)
        x = leaf(rng.normal(size=(1, 8, 8, 8)))
        assert check_params(bam, x, lambda: probe_sum(bam(x)), 1e-3) < 1e-3

    def test_gradients_train(self, wide, rng):
        bam = BAM(8, np.random.default_rng(0))
        x = leaf(rng.normal(size=(4, 8, 8, 8)))
        assert check_params(bam, x, lambda: probe_sum(bam(x)), 1e-3) < 1e-3

    def test_single_image_train_rejected(self):
        with pytest.raises(ShapeError):
            BAM(8, np.random.default_rng(0))(Tensor(np.ones((1, 8, 4, 4))))


def test_module_bookkeeping():
    cbr = CBR(2, 3, 3, np.random.default_rng(0))
    names = [n for n, _ in cbr.named_tensors()]
    assert names == ["conv.weight", "bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"]
    assert [n for n, _ in cbr.named_parameters()] == ["conv.weight", "bn.gamma", "bn.beta"]
    cbr.eval()
    assert not cbr.bn.training
    cbr.astype(np.float64)
    assert all(t.dtype == np.float64 for _, t in cbr.named_tensors())
