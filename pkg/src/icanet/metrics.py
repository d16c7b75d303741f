"""Salient-object-detection metrics: MAE, precision/recall and F-measure
curves, weighted F-measure, S-measure, E-measure, and mIoU.

Predictions are real maps in [0, 1]; thresholded metrics quantize them to
8 bits (``round(255 * p)``) and call a pixel positive when its level is
``>= t`` for ``t`` in 0..255.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

N_THRESHOLDS = 256
EPS = np.finfo(np.float64).eps


@dataclass
class SaliencyEval:
    """One prediction/GT pair; pred is clamped to [0, 1], gt must be binary."""

    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        pred = np.asarray(self.pred, dtype=np.float64)
        gt = np.asarray(self.gt)
        if pred.shape != gt.shape or pred.ndim != 2:
            raise ValueError(f"pred {pred.shape} and gt {gt.shape} must be equal 2-D shapes")
        if not np.isin(gt, (0, 1)).all():
            raise ValueError("gt must be binary")
        self.pred = np.clip(pred, 0.0, 1.0)
        self.gt = gt.astype(bool)


def quantize(pred: np.ndarray) -> np.ndarray:
    """8-bit levels, rounding half up."""
    return np.floor(np.clip(pred, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def mae(e: SaliencyEval) -> float:
    return float(np.abs(e.pred - e.gt).mean())


def _counts(e: SaliencyEval) -> tuple:
    """TP, FP, FN, TN for every threshold 0..255."""
    q = quantize(e.pred)
    hist_fg = np.bincount(q[e.gt], minlength=N_THRESHOLDS)
    hist_bg = np.bincount(q[~e.gt], minlength=N_THRESHOLDS)
    tp = np.cumsum(hist_fg[::-1])[::-1]
    fp = np.cumsum(hist_bg[::-1])[::-1]
    fn = hist_fg.sum() - tp
    tn = hist_bg.sum() - fp
    return tp, fp, fn, tn


def pr_curve(e: SaliencyEval) -> tuple:
    """Precision and recall for thresholds 0..255.

    Precision is 1 when nothing is predicted positive; recall is 1 when the
    GT has no foreground.
    """
    tp, fp, fn, _ = _counts(e)
    pos = tp + fp
    precision = np.where(pos > 0, tp / np.maximum(pos, 1), 1.0)
    n_fg = tp + fn
    recall = np.where(n_fg > 0, tp / np.maximum(n_fg, 1), 1.0)
    return precision, recall


def precision_recall(e: SaliencyEval, threshold: int) -> tuple:
    if not 0 <= threshold < N_THRESHOLDS:
        raise ValueError(f"threshold must be in 0..255, got {threshold}")
    p, r = pr_curve(e)
    return float(p[threshold]), float(r[threshold])


def f_measure(precision, recall, beta2: float = 0.3):
    """(1 + b2) P R / (b2 P + R); 0 where P = R = 0.  Works on arrays."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta2 * p + r
    out = np.where(den > 0, (1 + beta2) * p * r / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def f_curve(e: SaliencyEval, beta2: float = 0.3) -> np.ndarray:
    return f_measure(*pr_curve(e), beta2=beta2)


def f_measure_max(e: SaliencyEval, beta2: float = 0.3) -> float:
    return float(f_curve(e, beta2).max())


# ---------------------------------------------------------------------------
# weighted F-measure
# ---------------------------------------------------------------------------


def _circle_offsets(d2: int) -> list:
    """Integer offsets (dy, dx) with dy^2 + dx^2 == d2, in row-major order."""
    out = []
    r = math.isqrt(d2)
    for dy in range(-r, r + 1):
        rest = d2 - dy * dy
        dx = math.isqrt(rest)
        if dx * dx == rest:
            out.extend([(dy, -dx), (dy, dx)] if dx else [(dy, 0)])
    return out


def nearest_foreground(gt: np.ndarray) -> tuple:
    """Euclidean distance to, and flat index of, the nearest foreground pixel.

    Ties go to the lowest row-major index.  Foreground pixels map to
    themselves at distance 0.
    """
    h, w = gt.shape
    dist = ndimage.distance_transform_edt(~gt)
    d2 = np.rint(dist * dist).astype(np.int64)
    nearest = np.arange(h * w).reshape(h, w)
    ys, xs = np.nonzero(~gt)
    groups = d2[ys, xs]
    for value in np.unique(groups):
        sel = groups == value
        gy, gx = ys[sel], xs[sel]
        found = np.full(gy.shape, -1)
        for dy, dx in _circle_offsets(int(value)):
            todo = found < 0
            if not todo.any():
                break
            ty, tx = gy + dy, gx + dx
            ok = todo & (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            ok[ok] = gt[ty[ok], tx[ok]]
            found[ok] = ty[ok] * w + tx[ok]
        nearest[gy, gx] = found
    return dist, nearest


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def weighted_f_measure(e: SaliencyEval, beta2: float = 1.0, sigma: float = 5.0, window: int = 7) -> float:
    """Weighted F-measure (Margolin et al.).

    Background errors inherit the error of their nearest foreground pixel,
    are smoothed by a Gaussian, and background pixels are weighted by
    2 - exp(ln(0.5) / 5 * distance).  An empty GT falls back to 1 - mean(pred).
    """
    pred, gt = e.pred, e.gt
    if not gt.any():
        return float(1.0 - pred.mean())
    err = np.abs(pred - gt)
    dist, nearest = nearest_foreground(gt)
    et = err.reshape(-1)[nearest]
    ea = ndimage.correlate(et, gaussian_kernel(window, sigma), mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    weight = np.where(gt, 1.0, 2.0 - np.exp(math.log(0.5) / 5.0 * dist))
    ew = min_e * weight
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    r = 1.0 - ew[gt].mean()
    p = tpw / (EPS + tpw + fpw)
    return float((1 + beta2) * r * p / (EPS + r + beta2 * p))


# ---------------------------------------------------------------------------
# S-measure
# ---------------------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    mu = values.mean()
    sd = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sd + EPS)


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    g = gt.astype(np.float64)
    x, y = pred.mean(), g.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (g - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def gt_centroid(gt: np.ndarray) -> tuple:
    """Split point (cols, rows) of the region split: the 1-based, half-up
    rounded centroid, so the centroid pixel belongs to the top-left block."""
    h, w = gt.shape
    if not gt.any():
        return int(math.floor(w / 2 + 0.5)), int(math.floor(h / 2 + 0.5))
    ys, xs = np.nonzero(gt)
    return int(math.floor(xs.mean() + 1.5)), int(math.floor(ys.mean() + 1.5))


def s_measure(e: SaliencyEval, alpha: float = 0.5) -> float:
    """Structure measure alpha * S_object + (1 - alpha) * S_region (Fan et al.)."""
    pred, gt = e.pred, e.gt
    y = gt.mean()
    if y == 0 or y == 1:
        return float(1.0 - np.abs(pred - gt).mean())
    s_obj = y * _object_score(pred[gt]) + (1 - y) * _object_score(1.0 - pred[~gt])
    h, w = gt.shape
    cx, cy = gt_centroid(gt)
    area = h * w
    w1 = cx * cy / area
    w2 = (w - cx) * cy / area
    w3 = cx * (h - cy) / area
    w4 = 1.0 - w1 - w2 - w3
    blocks = (
        (slice(0, cy), slice(0, cx), w1),
        (slice(0, cy), slice(cx, w), w2),
        (slice(cy, h), slice(0, cx), w3),
        (slice(cy, h), slice(cx, w), w4),
    )
    s_reg = sum(wt * _region_ssim(pred[rs, cs], gt[rs, cs]) for rs, cs, wt in blocks if wt > 0)
    return float(np.clip(alpha * s_obj + (1 - alpha) * s_reg, 0.0, 1.0))


# ---------------------------------------------------------------------------
# E-measure
# ---------------------------------------------------------------------------


def e_curve(e: SaliencyEval) -> np.ndarray:
    """Enhanced-alignment score for each threshold 0..255.

    The binarized map and GT each take two bias values, so the per-pixel
    score depends only on the confusion cell; pixels are counted per cell.
    """
    tp, fp, fn, tn = _counts(e)
    n = e.gt.size
    mu_g = e.gt.mean()
    if mu_g == 0:
        return (fn + tn) / n
    if mu_g == 1:
        return (tp + fp) / n
    mu_f = (tp + fp) / n

    def enhanced(f_val, g_val):
        a = f_val - mu_f
        b = g_val - mu_g
        align = 2 * a * b / (a * a + b * b + EPS)
        return (align + 1) ** 2 / 4

    total = tp * enhanced(1.0, 1.0) + fp * enhanced(1.0, 0.0) + fn * enhanced(0.0, 1.0) + tn * enhanced(0.0, 0.0)
    return total / n


def e_measure(e: SaliencyEval, threshold: int) -> float:
    if not 0 <= threshold < N_THRESHOLDS:
        raise ValueError(f"threshold must be in 0..255, got {threshold}")
    return float(e_curve(e)[threshold])


def e_measure_max(e: SaliencyEval) -> float:
    return float(e_curve(e).max())


# ---------------------------------------------------------------------------
# mIoU
# ---------------------------------------------------------------------------


def confusion_matrix(pred_labels, gt_labels, n_classes: int) -> np.ndarray:
    """Rows are GT classes, columns predicted classes."""
    p = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    g = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if p.shape != g.shape:
        raise ValueError("label maps differ in size")
    for name, arr in (("pred", p), ("gt", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels outside [0, {n_classes})")
    return np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_from_confusion(cm: np.ndarray, absent: str = "skip") -> tuple:
    """Per-class TP / (TP + FP + FN) and their mean.

    Classes missing from both maps are skipped (``nan``) or, with
    ``absent="one"``, counted as a perfect 1.
    """
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    den = tp + fp + fn
    ious = np.where(den > 0, tp / np.maximum(den, 1), np.nan)
    if absent == "one":
        ious = np.where(den > 0, ious, 1.0)
    elif absent != "skip":
        raise ValueError(f"absent must be 'skip' or 'one', got {absent!r}")
    present = ~np.isnan(ious)
    return ious, float(ious[present].mean()) if present.any() else float("nan")


def miou(pred_labels, gt_labels, n_classes: int, absent: str = "skip") -> tuple:
    return miou_from_confusion(confusion_matrix(pred_labels, gt_labels, n_classes), absent)


# ---------------------------------------------------------------------------
# dataset reports
# ---------------------------------------------------------------------------

SCALARS = ("mae", "f_measure", "wf", "s_measure", "e_measure")


@dataclass
class MetricsReport:
    mae: float
    f_measure: float
    wf: float
    s_measure: float
    e_measure: float
    pr_curve: np.ndarray
    f_curve: np.ndarray
    e_curve: np.ndarray
    rows: list = field(default_factory=list)
    miou: Optional[float] = None
    class_ious: Optional[np.ndarray] = None

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in SCALARS}


def image_metrics(e: SaliencyEval) -> dict:
    p, r = pr_curve(e)
    fc = f_measure(p, r)
    ec = e_curve(e)
    flags = []
    if not e.gt.any():
        flags.append("empty_gt")
    elif e.gt.all():
        flags.append("full_gt")
    return {
        "mae": mae(e),
        "f_measure": float(fc.max()),
        "wf": weighted_f_measure(e),
        "s_measure": s_measure(e),
        "e_measure": float(ec.max()),
        "precision": p,
        "recall": r,
        "f_curve": fc,
        "e_curve": ec,
        "flags": flags,
    }


def evaluate_maps(items: Iterable[tuple]) -> MetricsReport:
    """``items`` yields ``(image_id, pred, gt)``.  Curves are averaged over
    images before taking the maximum."""
    rows, prec, rec, fcs, ecs = [], [], [], [], []
    for image_id, pred, gt in items:
        m = image_metrics(SaliencyEval(pred, gt))
        prec.append(m["precision"])
        rec.append(m["recall"])
        fcs.append(m["f_curve"])
        ecs.append(m["e_curve"])
        rows.append({"id": image_id, **{k: m[k] for k in SCALARS}, "flags": ";".join(m["flags"])})
    if not rows:
        raise ValueError("no images to evaluate")
    fmean = np.mean(fcs, axis=0)
    emean = np.mean(ecs, axis=0)
    return MetricsReport(
        mae=float(np.mean([r["mae"] for r in rows])),
        f_measure=float(fmean.max()),
        wf=float(np.mean([r["wf"] for r in rows])),
        s_measure=float(np.mean([r["s_measure"] for r in rows])),
        e_measure=float(emean.max()),
        pr_curve=np.stack([np.mean(prec, axis=0), np.mean(rec, axis=0)], axis=1),
        f_curve=fmean,
        e_curve=emean,
        rows=rows,
    )


def write_report(report: MetricsReport, out_dir, name: str = "metrics") -> tuple:
    """Per-image CSV with a trailing summary row, plus a 256-row curve CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / f"{name}.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *SCALARS, "flags"])
        for row in report.rows:
            writer.writerow([row["id"], *(f"{row[k]:.6f}" for k in SCALARS), row["flags"]])
        writer.writerow(["summary", *(f"{getattr(report, k):.6f}" for k in SCALARS), ""])
    curves = out_dir / f"{name}_curves.csv"
    with open(curves, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f_measure", "e_measure"])
        for t in range(N_THRESHOLDS):
            p, r = report.pr_curve[t]
            writer.writerow([t, f"{p:.6f}", f"{r:.6f}", f"{report.f_curve[t]:.6f}", f"{report.e_curve[t]:.6f}"])
    return table, curves


def format_table(report: MetricsReport) -> str:
    header = f"{'images':>8} " + " ".join(f"{k:>10}" for k in SCALARS)
    values = f"{len(report.rows):>8} " + " ".join(f"{getattr(report, k):>10.4f}" for k in SCALARS)
    return header + "\n" + values
