"""Pixel and region metrics for binary segmentation masks.

Conventions for degenerate inputs keep every metric defined and bounded:

* MCC is 0 when any factor of its denominator is 0.
* Precision (recall) is 0 when TP+FP (TP+FN) is 0; F1 is 0 when Pr+Re is 0,
  except that two empty masks score F1 = 1.
* Regions use 8-connectivity. The matching index normalizes by the number
  of foreground pixels in the segmentation and is 0 for an empty one.
* eta is 1 when both masks have no regions and 0 when exactly one has none.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

HAF_WEIGHT = 0.5
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class RegionLabeling:
    labels: np.ndarray
    count: int


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.size and not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return m.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: pred {p.shape}, gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def mcc(c: ConfusionCounts) -> float:
    denom = (c.tn + c.fn) * (c.tn + c.fp) * (c.tp + c.fn) * (c.tp + c.fp)
    if denom == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def precision_recall(c: ConfusionCounts) -> tuple[float, float]:
    pr = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    re = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return pr, re


def f1(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    pr, re = precision_recall(c)
    if pr + re == 0:
        return 0.0
    return 2 * pr * re / (pr + re)


def label_regions(mask) -> RegionLabeling:
    """8-connected component labels numbered in first-encounter raster order."""
    m = _binary(mask, "mask")
    raw, count = ndimage.label(m, structure=_EIGHT)
    if count:
        # renumber so labels follow the raster position of each region's first pixel
        flat = raw.ravel()
        first = np.full(count + 1, flat.size, dtype=np.int64)
        np.minimum.at(first, flat, np.arange(flat.size))
        order = np.argsort(first[1:], kind="stable") + 1
        remap = np.zeros(count + 1, dtype=np.int32)
        remap[order] = np.arange(1, count + 1, dtype=np.int32)
        raw = remap[raw]
    return RegionLabeling(raw.astype(np.int32), int(count))


def matching_index(pred_lab: RegionLabeling, gt_lab: RegionLabeling) -> float:
    if pred_lab.labels.shape != gt_lab.labels.shape:
        raise ValueError("labelings cover different image sizes")
    seg_area = int(np.count_nonzero(pred_lab.labels))
    if seg_area == 0:
        return 0.0
    ns, ng = pred_lab.count + 1, gt_lab.count + 1
    joint = np.bincount(
        pred_lab.labels.ravel().astype(np.int64) * ng + gt_lab.labels.ravel(), minlength=ns * ng
    ).reshape(ns, ng)
    pred_area = joint.sum(axis=1)
    gt_area = joint.sum(axis=0)
    total = 0.0
    for j in range(1, ns):
        overlaps = joint[j, 1:]
        if not overlaps.any():
            continue
        i = int(np.argmax(overlaps)) + 1  # argmax picks the lowest label on ties
        inter = int(joint[j, i])
        union = int(pred_area[j] + gt_area[i] - inter)
        total += inter * int(pred_area[j]) / union
    return total / seg_area


def _log(x: float) -> float:
    # log base is a single switch point
    return math.log(x)


def seg_ratio_eta(nr_s: int, nr_gt: int) -> float:
    if nr_s == 0 and nr_gt == 0:
        return 1.0
    if nr_s == 0 or nr_gt == 0:
        return 0.0
    if nr_s >= nr_gt:
        return nr_gt / nr_s
    return _log(1 + nr_s / nr_gt)


def hafiane(pred, gt) -> tuple[float, float, float]:
    """Return ``(M, eta, HAF)``."""
    ps, gs = label_regions(pred), label_regions(gt)
    if ps.count == 0 and gs.count == 0:
        return 1.0, 1.0, 1.0
    m = matching_index(ps, gs)
    eta = seg_ratio_eta(ps.count, gs.count)
    return m, eta, (m + HAF_WEIGHT * eta) / (1 + HAF_WEIGHT)


@dataclass
class ImageMetrics:
    id: str
    tp: int
    tn: int
    fp: int
    fn: int
    mcc: float
    pr: float
    re: float
    f1: float
    m: float
    eta: float
    haf: float


MEAN_FIELDS = ("mcc", "pr", "re", "f1", "m", "eta", "haf")


def image_metrics(pred, gt, id: str = "") -> ImageMetrics:
    c = confusion(pred, gt)
    pr, re = precision_recall(c)
    m, eta, haf = hafiane(pred, gt)
    return ImageMetrics(id, c.tp, c.tn, c.fp, c.fn, mcc(c), pr, re, f1(c), m, eta, haf)


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics]

    @property
    def mean(self) -> dict[str, float]:
        n = len(self.per_image)
        return {k: sum(getattr(r, k) for r in self.per_image) / n for k in MEAN_FIELDS}

    def to_dict(self) -> dict:
        return {"per_image": [asdict(r) for r in self.per_image], "mean": self.mean}


def report_from_masks(pairs) -> MetricsReport:
    """``pairs`` yields ``(id, pred, gt)``."""
    rows = [image_metrics(p, g, i) for i, p, g in pairs]
    if not rows:
        raise ValueError("cannot evaluate an empty dataset")
    return MetricsReport(rows)


def evaluate_dataset(model, samples, batch_size: int = 8) -> MetricsReport:
    """Evaluate a float ``ModelGraph`` or a ``QModel`` on ``SamplePair`` items."""
    from .quantizer import QModel, qpredict
    from .unet import predict_mask

    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    predict = (lambda x: qpredict(model, x)) if isinstance(model, QModel) else (lambda x: predict_mask(model, x))
    rows = []
    for s in range(0, len(samples), batch_size):
        chunk = samples[s:s + batch_size]
        x = np.stack([p.image for p in chunk])[:, None].astype(np.float32)
        masks = predict(x)
        rows.extend(image_metrics(m, p.mask, p.id) for m, p in zip(masks, chunk))
    return MetricsReport(rows)
