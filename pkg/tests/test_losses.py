"""Supervision tests: BCE, IoU, content loss, total loss, class weights."""

import math

import numpy as np
import pytest

from icanet import tensor as T
from icanet.checkpoint import write_records
from icanet.losses import (
    CamsBackbone,
    LossConfig,
    bce_loss,
    build_content_inputs,
    content_loss,
    iou_loss,
    total_loss,
    weighted_ce_class_weights,
)
from icanet.tensor import ShapeError, Tensor


def naive_bce(z, y):
    """-sum[y ln s + (1 - y) ln(1 - s)] / N, written out directly."""
    s = 1.0 / (1.0 + np.exp(-z))
    return -(y * np.log(s) + (1 - y) * np.log(1 - s)).sum() / z.shape[0]


def naive_iou(z, y):
    s = 1.0 / (1.0 + np.exp(-z))
    out = []
    for i in range(z.shape[0]):
        inter = (s[i] * y[i]).sum()
        union = (s[i] + y[i] - s[i] * y[i]).sum()
        out.append(1.0 - inter / (union + 1e-7))
    return float(np.mean(out))


@pytest.fixture
def cams():
    return CamsBackbone()


def random_case(rng, n=2, size=16):
    o2 = Tensor(rng.normal(size=(n, 1, size // 4, size // 4)))
    o3 = Tensor(rng.normal(size=(n, 1, size // 8, size // 8)))
    o4 = Tensor(rng.normal(size=(n, 1, size // 16, size // 16)))
    gt = Tensor((rng.random((n, 1, size, size)) > 0.6).astype(float))
    return o2, o3, o4, gt


class TestBCE:
    def test_saturated(self):
        assert bce_loss(Tensor(np.full((1, 1, 4, 4), 30.0)), Tensor(np.ones((1, 1, 4, 4)))).item() < 1e-8

    def test_single_pixel_ln2(self):
        assert bce_loss(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1)))).item() == pytest.approx(
            math.log(2), abs=1e-6
        )

    def test_naive_oracle(self, wide, rng):
        z, y = rng.normal(0, 3, (3, 1, 4, 4)), (rng.random((3, 1, 4, 4)) > 0.5).astype(float)
        assert bce_loss(Tensor(z), Tensor(y)).item() == pytest.approx(naive_bce(z, y), abs=1e-6)

    def test_extreme_logits_finite(self):
        z = np.array([[[[-500.0, 500.0]]]])
        y = np.array([[[[1.0, 0.0]]]])
        assert bce_loss(Tensor(z), Tensor(y)).item() == pytest.approx(1000.0)

    def test_batch_size_independent(self, wide, rng):
        z, y = rng.normal(size=(1, 1, 4, 4)), (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        one = bce_loss(Tensor(z), Tensor(y)).item()
        two = bce_loss(Tensor(np.concatenate([z, z])), Tensor(np.concatenate([y, y]))).item()
        assert two == pytest.approx(one, rel=1e-12)

    def test_errors(self):
        with pytest.raises(ShapeError):
            bce_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))
        with pytest.raises(ValueError, match="binary"):
            bce_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.full((1, 1, 2, 2), 0.5)))


class TestIoU:
    def test_perfect(self):
        gt = np.zeros((1, 1, 4, 4))
        gt[0, 0, :2] = 1
        assert iou_loss(Tensor(60 * gt - 30), Tensor(gt)).item() < 1e-6

    def test_half_overlap(self):
        gt = np.array([[[[1.0, 0.0], [1.0, 0.0]]]])
        assert iou_loss(Tensor(np.full((1, 1, 2, 2), 40.0)), Tensor(gt)).item() == pytest.approx(0.5, abs=1e-6)

    def test_naive_oracle(self, wide, rng):
        z, y = rng.normal(0, 2, (3, 1, 5, 5)), (rng.random((3, 1, 5, 5)) > 0.5).astype(float)
        assert iou_loss(Tensor(z), Tensor(y)).item() == pytest.approx(naive_iou(z, y), abs=1e-6)

    def test_all_zero_guarded(self):
        # 0 / (0 + eps): finite, and the empty overlap scores as a miss
        out = iou_loss(Tensor(np.full((1, 1, 2, 2), -100.0)), Tensor(np.zeros((1, 1, 2, 2)))).item()
        assert np.isfinite(out) and 0 <= out <= 1

    def test_range(self, rng):
        for _ in range(20):
            z, y = rng.normal(0, 5, (2, 1, 4, 4)), (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
            assert 0 <= iou_loss(Tensor(z), Tensor(y)).item() < 1


class TestContentInputs:
    def test_shapes_and_order(self, rng):
        o2, o3, o4, gt = random_case(rng)
        pred3, gt3 = build_content_inputs(o2, o3, o4, gt)
        assert pred3.shape == gt3.shape == (2, 3, 4, 4)
        np.testing.assert_array_equal(pred3.data[:, :1], T.sigmoid(o2).data)

    def test_gt_replicated_binary(self, rng):
        _, _, _, gt = random_case(rng)
        o2 = Tensor(np.zeros((2, 1, 4, 4)))
        _, gt3 = build_content_inputs(o2, Tensor(np.zeros((2, 1, 2, 2))), Tensor(np.zeros((2, 1, 1, 1))), gt)
        assert np.isin(gt3.data, (0, 1)).all()
        np.testing.assert_array_equal(gt3.data[:, 0], gt3.data[:, 2])

    def test_saturated_outputs_match_gt(self):
        gt = np.zeros((1, 1, 8, 8))
        gt[0, 0, 2:6, 2:6] = 1
        z = 60 * gt - 30
        pred3, gt3 = build_content_inputs(Tensor(z), Tensor(z), Tensor(z), Tensor(gt))
        np.testing.assert_allclose(pred3.data, gt3.data, atol=1e-6)


class TestContentLoss:
    def test_identity_zero(self, cams, rng):
        x = Tensor((rng.random((2, 3, 16, 16)) > 0.5).astype(float))
        total, terms = content_loss(x, x, cams)
        assert total.item() == 0.0 and [t.item() for t in terms] == [0.0] * 4

    def test_stage_weighting(self, cams, rng):
        p = Tensor(rng.random((2, 3, 16, 16)))
        g = Tensor((rng.random((2, 3, 16, 16)) > 0.5).astype(float))
        total, terms = content_loss(p, g, cams, (1, 0, 0, 0))
        assert total.item() == terms[0].item()

    def test_gradient(self, wide, cams, rng):
        p = Tensor(rng.random((2, 3, 16, 16)), requires_grad=True)
        g = Tensor((rng.random((2, 3, 16, 16)) > 0.5).astype(float))
        cams.astype(np.float64)
        assert T.grad_check(lambda t: content_loss(t, g, cams)[0], p, h=1e-6, max_coords=40) < 1e-3

    def test_frozen_extractor(self, cams, rng):
        p = Tensor(rng.random((2, 3, 16, 16)), requires_grad=True)
        g = Tensor((rng.random((2, 3, 16, 16)) > 0.5).astype(float))
        T.backward(content_loss(p, g, cams)[0])
        assert all(not t.requires_grad and t.grad is None for _, t in cams.named_tensors())
        assert np.abs(p.grad).sum() > 0

    def test_extractor_deterministic(self, rng):
        x = Tensor(rng.random((1, 3, 16, 16)))
        a, b = CamsBackbone()(x), CamsBackbone()(x)
        assert all(np.array_equal(u.data, v.data) for u, v in zip(a, b))

    def test_stage_extents(self, cams):
        feats = cams(Tensor(np.zeros((1, 3, 8, 8))))
        assert [f.shape[2] for f in feats] == [4, 2, 1, 1]

    def test_load_external_weights(self, tmp_path, rng):
        src = CamsBackbone(seed=99)
        path = tmp_path / "cams.ican"
        write_records(path, {n: t.data for n, t in src.named_tensors()})
        dst = CamsBackbone()
        dst.load(path)
        x = Tensor(rng.random((1, 3, 16, 16)))
        np.testing.assert_array_equal(dst(x)[-1].data, src(x)[-1].data)
        write_records(path, {"other": np.zeros(3)})
        with pytest.raises(KeyError):
            CamsBackbone().load(path)
        records = {n: t.data for n, t in src.named_tensors()}
        records["convs.0.weight"] = np.zeros(3)
        write_records(path, records)
        with pytest.raises(ShapeError):
            CamsBackbone().load(path)


class TestTotalLoss:
    def test_bookkeeping(self, cams, rng):
        rep = total_loss(*random_case(rng), LossConfig(), cams)
        assert rep.total == pytest.approx(rep.bce + rep.iou + 0.1 * rep.content, abs=1e-6)
        assert rep.loss.item() == pytest.approx(rep.total, rel=1e-5)
        assert rep.content == pytest.approx(sum(rep.stage_terms), rel=1e-5)

    def test_lambda_zero(self, cams, rng):
        rep = total_loss(*random_case(rng), LossConfig(lam=0.0), cams)
        assert rep.total == rep.bce + rep.iou

    def test_lambda_affine(self, wide, cams, rng):
        case = random_case(rng)
        cams.astype(np.float64)
        totals = [total_loss(*case, LossConfig(lam=lam), cams).total for lam in (0.0, 0.1, 0.2)]
        assert abs((totals[2] - totals[0]) - 2 * (totals[1] - totals[0])) < 1e-9

    def test_output_weights(self, cams, rng):
        case = random_case(rng)
        only_o2 = total_loss(*case, LossConfig(lam=0, output_weights=(1, 0, 0)), cams)
        o2, _, _, gt = case
        up = T.interp_bilinear(o2, 16, 16)
        assert only_o2.bce == pytest.approx(bce_loss(up, gt).item(), rel=1e-6)

    def test_non_negative(self, cams, rng):
        for _ in range(5):
            rep = total_loss(*random_case(rng), LossConfig(), cams)
            assert min(rep.bce, rep.iou, rep.content, rep.total) >= 0

    def test_perfect_prediction(self, cams):
        gt = np.zeros((2, 1, 32, 32))
        gt[:, :, 8:24, 5:20] = 1
        z = Tensor(60 * gt - 30)
        rep = total_loss(z, z, z, Tensor(gt), LossConfig(), cams)
        assert rep.bce < 1e-8 and rep.iou < 1e-6 and rep.total < 1e-6
        # sigmoid(-30) is 9e-14, not 0, so the content term is tiny but not exact
        assert rep.content < 1e-12

    @pytest.mark.parametrize("bits", [32, 64])
    def test_fully_saturated_content_exact(self, bits):
        gt = np.zeros((2, 1, 32, 32))
        gt[:, :, 3:17, 9:30] = 1
        with T.precision(bits):
            z = Tensor(1600 * gt - 800)
            pred3, gt3 = build_content_inputs(z, z, z, Tensor(gt))
            assert np.array_equal(pred3.data, gt3.data)
            rep = total_loss(z, z, z, Tensor(gt), LossConfig(), CamsBackbone())
        assert rep.content == 0.0 and rep.stage_terms == [0.0] * 4
        assert rep.bce == 0.0 and rep.iou < 1e-6

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lam=-1)
        with pytest.raises(ValueError):
            LossConfig(c=(1, 1, 1))
        with pytest.raises(ValueError):
            LossConfig.from_dict({"lambda_": 0.1})
        assert LossConfig.from_dict(LossConfig().to_dict()) == LossConfig()


class TestClassWeights:
    def test_scalar(self):
        w = weighted_ce_class_weights([1.0], 1.02)
        assert w[0] == pytest.approx(1 / math.log(2.02), rel=1e-12)
        assert w[0] == pytest.approx(1.4223, abs=1e-4)

    def test_monotone(self):
        w = weighted_ce_class_weights([0.01, 0.99])
        assert w[0] > w[1]

    def test_default_m(self):
        assert LossConfig().wce_m == 1.02

    @pytest.mark.parametrize("freqs,m", [([1.0], 1.0), ([0.5, 0.4], 1.02), ([1.2, -0.2], 1.02)])
    def test_errors(self, freqs, m):
        with pytest.raises(ValueError):
            weighted_ce_class_weights(freqs, m)
