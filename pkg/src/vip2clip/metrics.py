"""Image- and pixel-level detection metrics.

Tie conventions (they matter at the third decimal):

* AUROC counts a tied positive/negative pair as one half.
* AP and max-F1 evaluate one operating point per distinct score,
  predicting positive when ``score >= threshold``.
* AUPRO uses ``n_thresholds`` evenly spaced thresholds over the observed
  score range plus a leading predict-nothing point at FPR 0, integrates
  PRO over FPR with the trapezoid rule up to ``fpr_limit`` (interpolating
  at the limit), and divides by ``fpr_limit``.
"""
import csv
import io
from dataclasses import dataclass

import numpy as np

from vip2clip import numerics
from vip2clip.errors import NoPositives, NoRegions, ShapeMismatch, SingleClass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.size} scores vs {y.size} labels")
    return s, y


def _distinct_counts(s, y):
    """Cumulative (tp, fp) at each distinct score, scanning from the highest."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def auroc(scores, labels) -> float:
    s, y = _prep(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes")
    _, tp, fp = _distinct_counts(s, y)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # trapezoid over the step ROC == Mann-Whitney U with half credit for ties
    area = np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])) / 2.0
    return float(area / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AP needs at least one positive")
    _, tp, fp = _distinct_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_max(scores, labels) -> tuple[float, float]:
    """Best F1 over distinct-score thresholds and the (lowest) threshold reaching it."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("F1 needs at least one positive")
    thr, tp, fp = _distinct_counts(s, y)
    f1 = 2 * tp / (2 * tp + fp + (n_pos - tp))
    best = f1.max()
    # thresholds run high -> low, so the last maximiser is the lowest threshold
    i = np.flatnonzero(f1 == best)[-1]
    return float(best), float(thr[i])


def pro_curve(maps, masks, n_thresholds: int = 200):
    """(fpr, pro) arrays, ordered by increasing FPR, including the FPR-0 anchor."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m) > 0.5 for m in masks]
    if len(maps) != len(masks) or any(a.shape != b.shape for a, b in zip(maps, masks)):
        raise ShapeMismatch("maps and masks must pair up with equal shapes")
    groups, scores, offset = [], [], 0
    for m, gt in zip(maps, masks):
        labels, n = numerics.label_components(gt)
        # group 0 collects negatives; regions get globally unique ids
        g = np.where(labels > 0, labels + offset, 0)
        groups.append(g.ravel())
        scores.append(m.ravel())
        offset += n
    if offset == 0:
        raise NoRegions("AUPRO needs at least one ground-truth region")
    groups = np.concatenate(groups)
    scores = np.concatenate(scores)
    thresholds = np.linspace(scores.min(), scores.max(), n_thresholds)
    counts = numerics.threshold_counts(groups, scores, thresholds, offset + 1)
    sizes = np.bincount(groups, minlength=offset + 1)
    n_neg = sizes[0]
    fpr = counts[0] / n_neg if n_neg else np.zeros(n_thresholds)
    pro = (counts[1:] / sizes[1:, None]).mean(axis=0)
    # thresholds ascend, so reverse for increasing FPR and prepend predict-nothing
    return np.r_[0.0, fpr[::-1]], np.r_[0.0, pro[::-1]]


def integrate_limited(x, y, limit: float) -> float:
    """Trapezoid area of y(x) on [0, limit]; x must be non-decreasing."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if not keep.all():
        j = np.argmax(~keep)
        x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(maps, masks, fpr_limit: float = 0.3, n_thresholds: int = 200) -> float:
    fpr, pro = pro_curve(maps, masks, n_thresholds)
    return integrate_limited(fpr, pro, fpr_limit) / fpr_limit


@dataclass
class EvalReport:
    image_auroc: float
    image_ap: float
    image_f1: float
    image_threshold: float
    pixel_auroc: float
    pixel_aupro: float
    pixel_f1: float
    pixel_threshold: float
    n_images: int
    n_abnormal: int

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("image_auroc", self.image_auroc),
            ("image_ap", self.image_ap),
            ("image_f1_max", self.image_f1),
            ("image_f1_threshold", self.image_threshold),
            ("pixel_auroc", self.pixel_auroc),
            ("pixel_aupro", self.pixel_aupro),
            ("pixel_f1_max", self.pixel_f1),
            ("pixel_f1_threshold", self.pixel_threshold),
            ("n_images", self.n_images),
            ("n_abnormal", self.n_abnormal),
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in self.rows():
            w.writerow([name, repr(float(value)) if isinstance(value, float) else value])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'metric':<22}{'value':>10}"]
        lines += [f"{name:<22}{value:>10.4f}" if isinstance(value, float) else f"{name:<22}{value:>10d}"
                  for name, value in self.rows()]
        return "\n".join(lines)


def evaluate(scores, labels, maps, masks, fpr_limit: float = 0.3, n_thresholds: int = 200) -> EvalReport:
    """Full report; pixel metrics pool every pixel of every image."""
    labels = np.asarray(labels).astype(int)
    flat_maps = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    flat_masks = np.concatenate([(np.asarray(m) > 0.5).ravel() for m in masks])
    img_f1, img_thr = f1_max(scores, labels)
    pix_f1, pix_thr = f1_max(flat_maps, flat_masks)
    return EvalReport(
        image_auroc=auroc(scores, labels),
        image_ap=average_precision(scores, labels),
        image_f1=img_f1,
        image_threshold=img_thr,
        pixel_auroc=auroc(flat_maps, flat_masks),
        pixel_aupro=aupro(maps, masks, fpr_limit, n_thresholds),
        pixel_f1=pix_f1,
        pixel_threshold=pix_thr,
        n_images=len(labels),
        n_abnormal=int(labels.sum()),
    )
