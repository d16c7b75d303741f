"""Acceptance suite.  Each test prints one ``ACCEPTANCE <n> ... PASS|FAIL``
line (visible with ``pytest -v``; captured output is bypassed) and then
asserts the same verdict."""

import time

import numpy as np
import pytest

from icanet import tensor as T
from icanet.data import AugmentConfig, augment, collate, random_spec, sample_rng, synth_pair
from icanet.engine import GradcheckConfig, TrainConfig, run_gradcheck, saliency_maps, train
from icanet.losses import CamsBackbone, LossConfig, build_content_inputs, total_loss
from icanet.metrics import (
    SaliencyEval,
    e_curve,
    f_measure,
    f_measure_max,
    image_metrics,
    mae,
    miou,
    pr_curve,
    s_measure,
    weighted_f_measure,
)
from icanet.model import STAGES, ICANet, ModelConfig
from icanet.tensor import Tensor

from conftest import conv2d_loop
from test_metrics import e_loop, mae_loop, pr_loop, random_pair, s_loop, wf_loop


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return emit


def overfit_pairs(data_seed=1, size=32):
    out = []
    for i in range(4):
        rng = np.random.default_rng([data_seed, i])
        out.append(synth_pair(random_spec(rng, (size, size), f"s{i}"), rng))
    return out


# 1 -------------------------------------------------------------------------


def test_1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    reports = {bits: run_gradcheck(ModelConfig.tiny(32), LossConfig(), bits, GradcheckConfig()) for bits in (32, 64)}
    seconds = time.perf_counter() - t0
    groups = list(reports[64].groups)
    covered = all(any(key in g for g in groups) for key in ("bam", "svp_rgb", "ssp_thermal", "backbone_rgb", "heads"))
    ok = (
        reports[32].worst < 1e-3
        and reports[64].worst < 1e-5
        and all(r.cams_max_grad == 0.0 for r in reports.values())
        and covered
        and seconds < 300
    )
    detail = (
        f"{len(groups)} groups; worst 32-bit {reports[32].worst:.2e} < 1e-3, "
        f"worst 64-bit {reports[64].worst:.2e} < 1e-5; CAMS grads exactly 0; {seconds:.0f}s < 300s"
    )
    verdict(1, "gradient correctness", ok, detail)


# 2 -------------------------------------------------------------------------


def test_2_convolution_oracle(verdict, wide):
    rng = np.random.default_rng(2024)
    worst, impl_seconds = 0.0, 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        k = int(rng.choice([1, 3, 5, 7]))
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 5))
        padding = int(rng.integers(0, (dilation * (k - 1)) // 2 + 2))
        span = dilation * (k - 1) + 1
        h = int(rng.integers(max(1, span - 2 * padding), max(1, span - 2 * padding) + 6))
        w = int(rng.integers(max(1, span - 2 * padding), max(1, span - 2 * padding) + 6))
        n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
        x = rng.normal(size=(n, cin, h, w))
        wt = rng.normal(size=(cout, cin, k, k))
        b = rng.normal(size=cout) if rng.random() < 0.7 else None
        s = time.perf_counter()
        out = T.conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b),
                       stride=stride, padding=padding, dilation=dilation).data
        impl_seconds += time.perf_counter() - s
        ref = conv2d_loop(x, wt, b, stride, padding, dilation)
        assert out.shape == ref.shape
        worst = max(worst, float(np.abs(out - ref).max()))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-6 and seconds < 60
    verdict(2, "convolution oracle", ok,
            f"1000 cases, max abs diff {worst:.1e} <= 1e-6; {seconds:.1f}s total < 60s ({impl_seconds:.2f}s in conv2d)")


# 3 -------------------------------------------------------------------------


def test_3_loss_identities(verdict):
    gt = np.zeros((2, 1, 32, 32))
    gt[0, :, 8:24, 5:20] = 1
    gt[1, :, 2:12, 14:30] = 1
    cams = CamsBackbone()
    cfg = LossConfig()
    # logits of +-30: the bce / iou / total bounds
    z = Tensor(60 * gt - 30)
    near = total_loss(z, z, z, Tensor(gt), cfg, cams)
    # logits of +-800: sigmoid is exactly 0 or 1 in either width, so the
    # content inputs equal the GT stack and the content term is exactly 0
    exact = []
    for bits in (32, 64):
        with T.precision(bits):
            zs = Tensor(1600 * gt - 800)
            pred3, gt3 = build_content_inputs(zs, zs, zs, Tensor(gt))
            same = np.array_equal(pred3.data, gt3.data)
            exact.append((same, total_loss(zs, zs, zs, Tensor(gt), cfg, CamsBackbone())))
    # lambda affinity in wide precision
    with T.precision(64):
        rng = np.random.default_rng(3)
        logits = [Tensor(rng.normal(size=(2, 1, 32 // s, 32 // s))) for s in (4, 8, 16)]
        g = Tensor((rng.random((2, 1, 32, 32)) < 0.4).astype(float))
        cams64 = CamsBackbone()
        l0, l1, l2 = (total_loss(*logits, g, LossConfig(lam=lam), cams64).total for lam in (0.0, 0.1, 0.2))
    affine = abs((l2 - l0) - 2 * (l1 - l0))
    ok = (
        near.bce < 1e-8 and near.iou < 1e-6 and near.total < 1e-6
        and all(same and rep.content == 0.0 and rep.total < 1e-6 for same, rep in exact)
        and affine <= 1e-9
    )
    detail = (
        f"at +-30: bce {near.bce:.1e}, iou {near.iou:.1e}, total {near.total:.1e} "
        f"(content {near.content:.1e}); at full saturation content = {exact[0][1].content!r}/{exact[1][1].content!r} "
        f"(32/64-bit); |L(.2)-L(0)-2(L(.1)-L(0))| = {affine:.1e}"
    )
    verdict(3, "loss identities", ok, detail)


# 4 -------------------------------------------------------------------------


def iou_loop(pred_labels, gt_labels, cls):
    tp = fp = fn = 0
    for p, g in zip(pred_labels.ravel(), gt_labels.ravel()):
        tp += p == cls and g == cls
        fp += p == cls and g != cls
        fn += p != cls and g == cls
    return tp / (tp + fp + fn) if tp + fp + fn else None


def test_4_metric_oracles(verdict, wide):
    rng = np.random.default_rng(4)
    worst = dict.fromkeys(("mae", "pr", "f", "wf", "s", "e", "miou"), 0.0)
    for _ in range(200):
        pred, gt = random_pair(rng)
        e = SaliencyEval(pred, gt)
        worst["mae"] = max(worst["mae"], abs(mae(e) - mae_loop(pred, gt)))
        p_curve, r_curve = pr_curve(e)
        ref_pr = [pr_loop(pred, gt, t) for t in range(256)]
        worst["pr"] = max(worst["pr"], max(abs(p_curve[t] - rp) + abs(r_curve[t] - rr) for t, (rp, rr) in enumerate(ref_pr)))
        ref_f = max((1.3 * p * r / (0.3 * p + r) if p + r else 0.0) for p, r in ref_pr)
        worst["f"] = max(worst["f"], abs(f_measure_max(e) - ref_f))
        worst["wf"] = max(worst["wf"], abs(weighted_f_measure(e) - wf_loop(pred, gt)))
        worst["s"] = max(worst["s"], abs(s_measure(e) - s_loop(pred, gt)))
        ec = e_curve(e)
        worst["e"] = max(worst["e"], max(abs(ec[t] - e_loop(pred, gt, t)) for t in range(0, 256, 5)))
        labels = (pred >= 0.5).astype(int)
        ious, m = miou(labels, gt.astype(int), 2)
        ref = [iou_loop(labels, gt.astype(int), c) for c in (0, 1)]
        ref = [v for v in ref if v is not None]
        worst["miou"] = max(worst["miou"], abs(m - sum(ref) / len(ref)))
    perfect = 0.0
    for _ in range(50):
        _, gt = random_pair(rng)
        m = image_metrics(SaliencyEval(gt.astype(float), gt))
        perfect = max(perfect, m["mae"], *(1 - m[k] for k in ("f_measure", "wf", "s_measure", "e_measure")))
        perfect = max(perfect, 1 - miou(gt.astype(int), gt.astype(int), 2)[1])
    ok = max(worst.values()) <= 1e-6 and perfect <= 1e-6
    detail = ", ".join(f"{k} {v:.0e}" for k, v in worst.items()) + f"; perfection gap {perfect:.0e}"
    verdict(4, "metric oracle equivalence (200 pairs, tol 1e-6)", ok, detail)


# 5 -------------------------------------------------------------------------


def test_5_overfit(verdict):
    pairs = overfit_pairs()
    cfg = TrainConfig(
        lr_backbone=1e-4, lr_body=1e-3, momentum=0.9, weight_decay=5e-4, epochs=200, batch_size=4,
        model=ModelConfig.tiny(32), augment=AugmentConfig(p_zero=0.0, p_noise=0.0),
    )
    t0 = time.perf_counter()
    res = train(cfg, pairs)
    seconds = time.perf_counter() - t0
    first, last = res.log[0]["total"], res.log[-1]["total"]
    rgb, th, _ = collate(pairs)
    maps = saliency_maps(res.model, rgb, th, [(32, 32)] * 4)
    maes = [float(np.abs(m - p.gt.data[0, 0]).mean()) for m, p in zip(maps, pairs)]
    ok = len(res.log) == 200 and last < 0.25 * first and max(maes) < 0.05 and seconds < 600
    detail = (
        f"200 steps, loss {first:.1f} -> {last:.1f} (ratio {last / first:.3f} < 0.25), "
        f"per-pair MAE {[round(v, 3) for v in maes]} < 0.05; {seconds:.0f}s < 600s"
    )
    verdict(5, "overfit smoke test", ok, detail)


# 6 -------------------------------------------------------------------------


def test_6_augmentation_statistics(verdict):
    rng = np.random.default_rng(6)
    pair = synth_pair(random_spec(rng, (8, 8)), rng)
    gt_bytes = pair.gt.data.tobytes()
    cfg = AugmentConfig()
    n, zeroed, noised, gt_ok = 10000, 0, 0, True
    for i in range(n):
        out = augment(pair, cfg, sample_rng(cfg.seed, 0, i))
        zeroed += "zeroed" in out.meta
        noised += "noise" in out.meta
        gt_ok &= out.gt.data.tobytes() == gt_bytes
    fz, fn = zeroed / n, noised / n
    ok = abs(fz - 0.05) <= 0.0066 and abs(fn - 0.05) <= 0.0066 and gt_ok
    verdict(6, "augmentation statistics", ok,
            f"zeroing {fz:.2%}, noise {fn:.2%} (5% +- 0.66%); GT bit-identical in all {n} samples: {gt_ok}")


# 7 -------------------------------------------------------------------------


def test_7_determinism_and_persistence(verdict, tmp_path):
    pairs = [synth_pair(random_spec(np.random.default_rng([7, i]), (32, 32), f"s{i}"), np.random.default_rng([7, i]))
             for i in range(4)]
    cfg = TrainConfig(lr_backbone=1e-4, lr_body=1e-3, epochs=3, batch_size=2, model=ModelConfig.tiny(32),
                      augment=AugmentConfig(p_zero=0.3, p_noise=0.3))
    a = train(cfg, pairs, tmp_path / "a")
    train(cfg, pairs, tmp_path / "b")
    identical = (tmp_path / "a/last.ican").read_bytes() == (tmp_path / "b/last.ican").read_bytes()
    # stop mid-epoch, reload, continue
    train(cfg, pairs, tmp_path / "c", max_steps=3)
    rest = train(cfg, pairs, tmp_path / "c", resume=tmp_path / "c/last.ican")
    keys = ("ids", "lr_backbone", "lr_body", "bce", "iou", "content", "total")
    stepwise = [tuple(r[k] for k in keys) for r in rest.log] == [tuple(r[k] for k in keys) for r in a.log[3:]]
    resumed_same = (tmp_path / "a/last.ican").read_bytes() == (tmp_path / "c/last.ican").read_bytes()
    ok = identical and stepwise and resumed_same
    verdict(7, "determinism and persistence", ok,
            f"identical checkpoints: {identical}; resumed run matches steps 3..5 bit for bit: {stepwise}; "
            f"final checkpoint identical after resume: {resumed_same}")


# 8 -------------------------------------------------------------------------


def test_8_shape_ledger(verdict):
    problems = []
    for size in (32, 64, 96):
        cfg = ModelConfig(input_size=(size, size))
        model = ICANet(cfg)
        rng = np.random.default_rng(size)
        x = Tensor(rng.random((2, 3, size, size)))
        y = Tensor(rng.random((2, 3, size, size)))
        (o2, o3, o4), feats = model(x, y)
        c = cfg.unified_channels
        for i, stage in enumerate(STAGES):
            expect = (2, c, size // 2 ** stage, size // 2 ** stage)
            for name in ("r", "t", "f", "m"):
                got = getattr(feats, name)[i].shape
                if got != expect:
                    problems.append(f"{size}: {name}{stage} {got} != {expect}")
            r, t, f = feats.r[i], feats.t[i], feats.f[i]
            hff = model.hff[i]
            for mod_name, mod, arg in (("svp", hff.svp_rgb, r), ("ssp", hff.ssp_thermal, t),
                                       ("bam", model.msar[i].bam, f)):
                if mod(arg).shape != arg.shape:
                    problems.append(f"{size}: {mod_name}{stage} changes shape")
        for o, s in zip((o2, o3, o4), (4, 8, 16)):
            if o.shape != (2, 1, size // s, size // s):
                problems.append(f"{size}: output at stride {s} is {o.shape}")
    ok = not problems
    verdict(8, "shape ledger", ok, "sizes 32/64/96: stride law, 1-channel o2/o3/o4 at strides 4/8/16, "
            "SVP/SSP/MSAR/BAM shape-preserving" if ok else "; ".join(problems[:5]))
