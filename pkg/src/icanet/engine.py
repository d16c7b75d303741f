"""Training, evaluation, prediction and the gradient-check harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, apply_to_model, load_checkpoint, reshape_momenta, save_checkpoint
from .data import (
    AugmentConfig,
    DatasetManifest,
    SynthSpec,
    augment,
    collate,
    load_pair,
    read_image,
    resize,
    sample_rng,
    synth_pair,
    to_uint8,
    write_png,
)
from .losses import CamsBackbone, LossConfig, total_loss
from .metrics import MetricsReport, evaluate_maps
from .model import ICANet, ModelConfig
from .tensor import Tensor

log = logging.getLogger("icanet")


class TrainingError(RuntimeError):
    """Training hit a non-finite value; carries the offending batch ids."""

    def __init__(self, step: int, ids: Sequence[str], reason: str):
        super().__init__(f"step {step}, batch {list(ids)}: {reason}")
        self.step, self.ids = step, list(ids)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class GradcheckConfig:
    batch: int = 4
    coords_per_group: int = 4
    h: float = 1e-5
    seed: int = 0
    tol_standard: float = 1e-3
    tol_wide: float = 1e-5

    @classmethod
    def from_dict(cls, d: dict) -> "GradcheckConfig":
        _strict(cls, d, "gradcheck")
        return cls(**d)


def _strict(cls, d: dict, section: str) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")


@dataclass
class TrainConfig:
    lr_backbone: float = 5e-3
    lr_body: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 40
    batch_size: int = 2
    warmup_steps: Optional[int] = None
    seed: int = 0
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def __post_init__(self):
        if self.lr_backbone < 0 or self.lr_body < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            # train-mode batch norm over pooled or 1x1 maps needs two samples
            raise ValueError("batch_size must be >= 2")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")

    def total_steps(self, n_samples: int) -> int:
        per_epoch = n_samples // self.batch_size
        if per_epoch < 1:
            raise ValueError(f"{n_samples} samples cannot fill one batch of {self.batch_size}")
        return per_epoch * self.epochs

    def resolved_warmup(self, total: int) -> int:
        warm = total // 10 if self.warmup_steps is None else self.warmup_steps
        if warm >= total:
            raise ValueError(f"warmup_steps {warm} must be below total steps {total}")
        return warm

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["loss"] = self.loss.to_dict()
        d["model"] = self.model.to_dict()
        d["augment"] = self.augment.to_dict()
        d["gradcheck"] = asdict(self.gradcheck)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        _strict(cls, d, "train")
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "gradcheck" in d:
            d["gradcheck"] = GradcheckConfig.from_dict(d["gradcheck"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp from 0 over the warm-up, then linear decay towards 0."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must be below total_steps {total_steps}")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


def sgd_step(
    params: Sequence[tuple],
    momenta: dict,
    lr_map: dict,
    momentum: float,
    weight_decay: float,
) -> None:
    """In place: ``v = momentum * v + grad + wd * p``; ``p -= lr * v``.

    ``params`` holds ``(name, tensor)`` pairs; missing momentum buffers
    start at zero.
    """
    for name, p in params:
        g = p.grad
        if g is None or g.shape != p.shape:
            raise T.ShapeError(f"{name}: gradient shape {None if g is None else g.shape} vs {p.shape}")
        v = momenta.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise T.ShapeError(f"{name}: momentum shape {v.shape} vs {p.shape}")
        v = (momentum * v + g + weight_decay * p.data).astype(p.dtype)
        momenta[name] = v
        p.data = (p.data - lr_map[name] * v).astype(p.dtype)


def lr_map_for(model: ICANet, lr_backbone: float, lr_body: float) -> dict:
    backbone = model.backbone_parameter_names()
    return {n: lr_backbone if n in backbone else lr_body for n, _ in model.named_parameters()}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ICANet
    momenta: dict
    log: list
    step: int
    checkpoint: Optional[Path] = None


def _check_finite_report(report, step: int, ids) -> None:
    if not np.isfinite(report.total):
        raise TrainingError(step, ids, f"non-finite loss {report.total}")


def train(
    cfg: TrainConfig,
    pairs: Sequence,
    out_dir=None,
    resume=None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Seeded mini-batch SGD over ``pairs`` (loaded :class:`SamplePair`s).

    Each epoch visits a permutation drawn from a generator seeded by
    ``cfg.seed``; incomplete final batches are dropped.  Every sample is
    augmented with its own ``(seed, epoch, index)`` stream.  ``resume``
    continues from a checkpoint written by this function; ``max_steps``
    stops early (the schedule still spans the full run).
    """
    pairs = list(pairs)
    n = len(pairs)
    if n == 0:
        raise ValueError("no training pairs")
    total = cfg.total_steps(n)
    warmup = cfg.resolved_warmup(total)
    per_epoch = n // cfg.batch_size
    model = ICANet(cfg.model)
    cams = CamsBackbone(cfg.loss.cams_widths, cfg.loss.cams_seed)
    order_rng = np.random.default_rng(cfg.seed)
    momenta: dict = {}
    step, order = 0, None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        apply_to_model(model, ckpt)
        momenta = {k: v.astype(T.get_dtype()) for k, v in reshape_momenta(model, ckpt.momenta).items()}
        step = ckpt.step
        order_rng.bit_generator.state = ckpt.meta["order_rng"]
        order = np.array(ckpt.meta["epoch_order"], dtype=np.int64) if ckpt.meta.get("epoch_order") else None
    params = list(model.named_parameters())
    log_rows: list = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    stop = total if max_steps is None else min(total, step + max_steps)
    last_ckpt = None
    while step < stop:
        epoch, b = divmod(step, per_epoch)
        if b == 0 or order is None:
            order = order_rng.permutation(n)
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        batch = [augment(pairs[i], cfg.augment, sample_rng(cfg.augment.seed + cfg.seed, epoch, int(i))) for i in idx]
        ids = [p.id for p in batch]
        rgb, th, gt = collate(batch)
        model.train()
        model.zero_grad()
        try:
            (o2, o3, o4), _ = model(rgb, th)
            report = total_loss(o2, o3, o4, gt, cfg.loss, cams)
            _check_finite_report(report, step, ids)
            T.backward(report.loss)
        except T.NonFiniteError as exc:
            raise TrainingError(step, ids, str(exc)) from exc
        lr_b = lr_schedule(step, total, warmup, cfg.lr_backbone)
        lr_o = lr_schedule(step, total, warmup, cfg.lr_body)
        sgd_step(params, momenta, lr_map_for(model, lr_b, lr_o), cfg.momentum, cfg.weight_decay)
        row = {
            "step": step, "epoch": epoch, "ids": ids, "lr_backbone": lr_b, "lr_body": lr_o,
            "bce": report.bce, "iou": report.iou, "content": report.content, "total": report.total,
        }
        log_rows.append(row)
        log.debug("step %d loss %.6f", step, report.total)
        step += 1
        # the order of the running epoch must survive a mid-epoch resume
        order_state = order.tolist() if step % per_epoch else None
        if out is not None and (step == stop or (cfg.checkpoint_every and step % cfg.checkpoint_every == 0)):
            last_ckpt = out / f"ckpt_{step:06d}.ican"
            meta = {
                "step": step, "total_steps": total, "order_rng": order_rng.bit_generator.state,
                "epoch_order": order_state, "config": cfg.to_dict(),
            }
            save_checkpoint(last_ckpt, model, momenta, meta)
            save_checkpoint(out / "last.ican", model, momenta, meta)
    if out is not None:
        with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")
    return TrainResult(model=model, momenta=momenta, log=log_rows, step=step, checkpoint=last_ckpt)


def model_from_checkpoint(path) -> tuple:
    """Rebuild the model recorded in a training checkpoint (eval mode)."""
    ckpt = load_checkpoint(path)
    if "config" not in ckpt.meta:
        raise ValueError(f"{path}: checkpoint carries no model config")
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    model = ICANet(cfg.model)
    apply_to_model(model, ckpt)
    model.eval()
    return model, cfg, ckpt


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def saliency_maps(model: ICANet, rgb: Tensor, thermal: Tensor, sizes: Sequence[tuple]) -> list:
    """sigmoid(o2) upsampled to each requested (H, W); eval mode, no graph."""
    model.eval()
    with T.no_grad():
        (o2, _, _), _ = model(rgb, thermal)
        maps = []
        for i, (h, w) in enumerate(sizes):
            up = T.interp_bilinear(Tensor(o2.data[i:i + 1]), h, w)
            maps.append(T.sigmoid(up).data[0, 0].astype(np.float64))
    return maps


def _native_gt(path) -> np.ndarray:
    return (read_image(path).mean(axis=2) >= 0.5).astype(np.float64)


def evaluate(model: ICANet, manifest: DatasetManifest, batch_size: int = 4, report_dir=None) -> MetricsReport:
    """Metrics of sigmoid(o2), upsampled to each GT's native size."""
    size = model.cfg.input_size
    items = []
    entries = list(manifest.entries)
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        pairs = [load_pair(e, size) for e in chunk]
        gts = [_native_gt(e.gt) for e in chunk]
        rgb, th, _ = collate(pairs)
        maps = saliency_maps(model, rgb, th, [g.shape for g in gts])
        items.extend((e.id, m, g) for e, m, g in zip(chunk, maps, gts))
    report = evaluate_maps(items)
    if report_dir is not None:
        from .metrics import write_report

        write_report(report, report_dir)
    return report


def predict(model: ICANet, inputs: Sequence[tuple], out_dir, batch_size: int = 4) -> list:
    """Write 8-bit saliency PNGs named by id.

    ``inputs`` holds ``(id, rgb_path, thermal_path)``; maps come out at the
    RGB file's native size.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    size = model.cfg.input_size
    written = []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start:start + batch_size]
        rgbs, ths, sizes = [], [], []
        for _, rgb_path, th_path in chunk:
            rgb = read_image(rgb_path)
            th = read_image(th_path)
            if rgb.shape[:2] != th.shape[:2]:
                raise ValueError(f"{rgb_path} and {th_path} differ in size")
            sizes.append(rgb.shape[:2])
            rgb = np.repeat(rgb, 3, axis=2) if rgb.shape[2] == 1 else rgb
            th = np.repeat(th, 3, axis=2) if th.shape[2] == 1 else th
            rgbs.append(resize(rgb, *size).transpose(2, 0, 1))
            ths.append(resize(th, *size).transpose(2, 0, 1))
        maps = saliency_maps(model, Tensor(np.stack(rgbs)), Tensor(np.stack(ths)), sizes)
        for (sid, _, _), m in zip(chunk, maps):
            path = out / f"{sid}.png"
            write_png(path, m)
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    bits: int
    tolerance: float
    groups: dict
    checked: dict
    kinks: dict
    cams_max_grad: float
    seconds: float
    worst_coords: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.groups.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance and self.cams_max_grad == 0.0

    def lines(self) -> list:
        out = [f"{'group':24s} {'max rel err':>12s} {'coords':>7s} {'kinks':>6s}"]
        for name, err in self.groups.items():
            flag = "" if err < self.tolerance else "  FAIL"
            out.append(f"{name:24s} {err:12.3e} {self.checked[name]:7d} {self.kinks[name]:6d}{flag}")
        out.append(f"{'cams (frozen)':24s} {'max |grad| = ' + repr(self.cams_max_grad):>27s}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: {self.bits}-bit, worst {self.worst:.3e} (tolerance {self.tolerance:g}), {self.seconds:.1f}s")
        return out


def _gradcheck_inputs(model_cfg: ModelConfig, batch: int, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    h, w = model_cfg.input_size
    rgb = rng.random((batch, 3, h, w))
    th = rng.random((batch, 3, h, w))
    gts = []
    for i in range(batch):
        r = rng.uniform(0.2, 0.3) * h
        spec = SynthSpec(size=(h, w), center=(rng.uniform(r, h - r), rng.uniform(r, w - r)), extent=(r, r))
        gts.append(synth_pair(spec, np.random.default_rng([seed, i])).gt.data[0])
    return rgb, th, np.stack(gts)


def check_tiny(model_cfg: ModelConfig) -> None:
    h, w = model_cfg.input_size
    widest = max(model_cfg.unified_channels, model_cfg.stem_width, *model_cfg.stage_widths)
    if h > 32 or w > 32 or widest > 8:
        raise ValueError(f"gradcheck needs a tiny config (<= 32x32 input, <= 8 channels); got {h}x{w}, {widest} channels")


def run_gradcheck(
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    bits: int,
    gc: GradcheckConfig = GradcheckConfig(),
) -> GradcheckReport:
    """Per-group gradient check of the full pipeline (model + all losses).

    Backprop runs at the requested width.  Central differences always run
    in 64-bit on the same parameter values: a 32-bit loss of this magnitude
    cannot resolve small gradients by differencing, so the 64-bit difference
    is the reference for both widths.  Coordinates whose perturbation flips
    a ReLU are replaced by fresh ones.
    """
    check_tiny(model_cfg)
    t0 = time.perf_counter()
    rgb_np, th_np, gt_np = _gradcheck_inputs(model_cfg, gc.batch, gc.seed)
    with T.precision(bits):
        model = ICANet(model_cfg)
        cams = CamsBackbone(loss_cfg.cams_widths, loss_cfg.cams_seed)
        rgb, th, gt = Tensor(rgb_np), Tensor(th_np), Tensor(gt_np)
        model.train()
        model.zero_grad()
        (o2, o3, o4), _ = model(rgb, th)
        T.backward(total_loss(o2, o3, o4, gt, loss_cfg, cams).loss)
        analytic = {n: p.grad.astype(np.float64).reshape(-1) for n, p in model.named_parameters()}
    cams_grads = [t.grad for _, t in cams.named_tensors() if t.grad is not None]
    cams_max = max([float(np.abs(g).max()) for g in cams_grads] + [0.0])
    if any(t.requires_grad for _, t in cams.named_tensors()):
        cams_max = float("inf")

    groups, checked, kinks, worst_coords = {}, {}, {}, {}
    with T.precision(64):
        model.astype(np.float64)
        cams.astype(np.float64)
        rgb, th, gt = Tensor(rgb_np), Tensor(th_np), Tensor(gt_np)

        def f() -> float:
            (a, b, c), _ = model(rgb, th)
            return total_loss(a, b, c, gt, loss_cfg, cams).total

        rng = np.random.default_rng(gc.seed)
        for gname, plist in model.parameter_groups().items():
            offsets = np.cumsum([0] + [p.size for _, p in plist])
            candidates = rng.permutation(offsets[-1])
            worst, n_ok, n_kink, where = 0.0, 0, 0, None
            with T.no_grad():
                for flat in candidates:
                    if n_ok >= gc.coords_per_group:
                        break
                    k = int(np.searchsorted(offsets, flat, side="right") - 1)
                    name, p = plist[k]
                    i = int(flat - offsets[k])
                    num, crossed = T.numeric_grad(f, p, [i], gc.h)
                    if crossed[0]:
                        n_kink += 1
                        continue
                    err = float(T.relative_error(analytic[name][i:i + 1], num)[0])
                    if where is None or err > worst:
                        worst, where = err, (name, i, float(analytic[name][i]), float(num[0]))
                    n_ok += 1
            groups[gname], checked[gname], kinks[gname] = worst, n_ok, n_kink
            worst_coords[gname] = where
    tol = gc.tol_standard if bits == 32 else gc.tol_wide
    return GradcheckReport(bits, tol, groups, checked, kinks, cams_max, time.perf_counter() - t0, worst_coords)
