"""Supervision: BCE, soft IoU, the multi-stage content loss computed by a
frozen feature extractor, the combined objective, and class weights for
weighted cross entropy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor

IOU_EPS = 1e-7


@dataclass
class LossConfig:
    lam: float = 0.1
    c: tuple = (1.0, 1.0, 1.0, 1.0)
    output_weights: tuple = (1.0, 1.0, 1.0)
    wce_m: float = 1.02
    cams_widths: tuple = (8, 16, 16, 32, 32)
    cams_seed: int = 1234

    def __post_init__(self):
        self.c = tuple(float(v) for v in self.c)
        self.output_weights = tuple(float(v) for v in self.output_weights)
        self.cams_widths = tuple(int(v) for v in self.cams_widths)
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if len(self.c) != 4 or min(self.c) < 0:
            raise ValueError("c needs 4 non-negative stage weights")
        if len(self.output_weights) != 3:
            raise ValueError("output_weights needs 3 entries (o2, o3, o4)")
        if len(self.cams_widths) != 5:
            raise ValueError("cams_widths needs 5 entries")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("c", "output_weights", "cams_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


class CamsBackbone(Module):
    """Weight-locked 5-stage extractor (3x3 conv + ReLU; stride 1 then four
    stride-2 stages) emitting stage 2-5 features.

    Stride-2 convolutions with padding 1 give ceil(H/2) extents, so inputs as
    small as 8x8 still produce a 1x1 stage-5 map.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 16, 32, 32), seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.convs = []
        cin = 3
        for i, w in enumerate(widths):
            conv = Conv2d(cin, w, 3, rng, stride=1 if i == 0 else 2, padding=1)
            # He-uniform scaling keeps activations from shrinking stage to stage
            bound = np.sqrt(6.0 / (cin * 9))
            conv.weight = Tensor(rng.uniform(-bound, bound, conv.weight.shape))
            conv.bias = Tensor(rng.uniform(-0.1, 0.1, conv.bias.shape))
            self.convs.append(conv)
            cin = w
        self.train(False)

    def forward(self, x: Tensor) -> list:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"CAMS extractor expects (N, 3, H, W), got {x.shape}")
        feats = []
        for conv in self.convs:
            x = T.relu(conv(x))
            feats.append(x)
        return feats[1:]

    def load(self, path) -> None:
        """Replace the frozen weights with tensors from a checkpoint file."""
        from .checkpoint import read_records

        records = read_records(path)
        for name, t in self.named_tensors():
            if name not in records:
                raise KeyError(f"CAMS weights file lacks {name!r}")
            arr = records[name]
            if arr.size != t.size:
                raise ShapeError(f"CAMS weight {name}: expected {t.shape}, file has {arr.shape}")
            t.data = arr.reshape(t.shape).astype(t.dtype)


@dataclass
class LossReport:
    bce: float
    iou: float
    content: float
    total: float
    stage_terms: list = field(default_factory=list)
    loss: Optional[Tensor] = field(default=None, repr=False)


def _check_gt(logits: Tensor, gt: Tensor, name: str) -> None:
    if logits.shape != gt.shape:
        raise ShapeError(f"{name}: logits {logits.shape} vs gt {gt.shape}")
    if not np.isin(gt.data, (0, 1)).all():
        raise ValueError(f"{name}: ground truth must be binary")


def bce_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Pixel-summed binary cross entropy on logits, divided by batch size.

    Uses -[y ln s(z) + (1-y) ln(1-s(z))] = softplus(z) - y z.
    """
    _check_gt(logits, gt, "bce_loss")
    per_pixel = T.softplus(logits) - logits * gt
    return T.tsum(per_pixel) * (1.0 / logits.shape[0])


def iou_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Batch mean of per-image 1 - soft IoU."""
    _check_gt(logits, gt, "iou_loss")
    x = T.sigmoid(logits)
    xy = x * gt
    axes = tuple(range(1, logits.ndim))
    inter = T.tsum(xy, axes)
    union = T.tsum(x + gt - xy, axes) + IOU_EPS
    return T.tmean(1.0 - inter / union)


def binarize(x: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (x >= threshold).astype(x.dtype)


def build_content_inputs(o2: Tensor, o3: Tensor, o4: Tensor, gt: Tensor) -> tuple:
    """Stack the three sigmoid maps at o2's extent, and the resized,
    re-binarized GT replicated to three channels."""
    h, w = o2.shape[2], o2.shape[3]
    pred3 = T.concat_channels([
        T.sigmoid(o2),
        T.sigmoid(T.interp_bilinear(o3, h, w)),
        T.sigmoid(T.interp_bilinear(o4, h, w)),
    ])
    with T.no_grad():
        g = binarize(T.interp_bilinear(gt.detach(), h, w).data)
    gt3 = Tensor(np.concatenate([g, g, g], axis=1))
    return pred3, gt3


def content_loss(pred3: Tensor, gt3: Tensor, cams: CamsBackbone, c: Sequence[float] = (1, 1, 1, 1)) -> tuple:
    """Weighted sum of per-stage feature MSEs; returns (total, stage terms).

    The GT branch runs without graph recording, so gradients reach ``pred3``
    only and never the frozen extractor.
    """
    if pred3.shape != gt3.shape:
        raise ShapeError(f"content_loss: {pred3.shape} vs {gt3.shape}")
    feats = cams(pred3)
    with T.no_grad():
        targets = cams(gt3)
    terms = []
    for f, g in zip(feats, targets):
        d = f - g.detach()
        terms.append(T.tmean(d * d))
    total = terms[0] * c[0]
    for ci, term in zip(c[1:], terms[1:]):
        total = total + term * ci
    return total, terms


def total_loss(o2: Tensor, o3: Tensor, o4: Tensor, gt: Tensor, cfg: LossConfig, cams: CamsBackbone) -> LossReport:
    """Deep-supervised BCE + IoU on o2..o4 (upsampled to GT size) plus
    lambda times the content loss."""
    h, w = gt.shape[2], gt.shape[3]
    bce_t = iou_t = None
    for weight, o in zip(cfg.output_weights, (o2, o3, o4)):
        up = T.interp_bilinear(o, h, w)
        b = bce_loss(up, gt) * weight
        i = iou_loss(up, gt) * weight
        bce_t = b if bce_t is None else bce_t + b
        iou_t = i if iou_t is None else iou_t + i
    pred3, gt3 = build_content_inputs(o2, o3, o4, gt)
    content_t, terms = content_loss(pred3, gt3, cams, cfg.c)
    loss = bce_t + iou_t + content_t * cfg.lam
    bce, iou, content = bce_t.item(), iou_t.item(), content_t.item()
    return LossReport(
        bce=bce,
        iou=iou,
        content=content,
        total=bce + iou + cfg.lam * content,
        stage_terms=[t.item() for t in terms],
        loss=loss,
    )


def weighted_ce_class_weights(class_freqs, m: float = 1.02) -> np.ndarray:
    """w_c = 1 / ln(m + P_c); rarer classes get larger weights."""
    p = np.asarray(class_freqs, dtype=np.float64)
    if m <= 1:
        raise ValueError(f"m must exceed 1 so that ln(m + P) > 0, got {m}")
    if (p < 0).any() or (p > 1).any():
        raise ValueError("class frequencies must lie in [0, 1]")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"class frequencies must sum to 1, got {p.sum()}")
    return 1.0 / np.log(m + p)
