"""Target-level evaluation: component labeling, centroid matching, IoU/Pd/Fa.

A predicted component counts toward the detection probability when its
centroid falls within the deviation threshold (default 3 px) of a
ground-truth centroid; matching is greedy by ascending centroid distance
with at most one pairing per component on either side. Pixels of unmatched
predicted components feed the false-alarm rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class LabeledMask:
    labels: np.ndarray  # int32, 0 = background, 1..K component ids
    centroids: list  # (x, y) per component, arithmetic mean of pixel coords
    areas: list  # pixel counts per component

    @property
    def count(self):
        return len(self.areas)


@dataclass
class MatchConfig:
    d_thresh: float = 3.0
    binarize_threshold: float = 0.5

    def validate(self):
        if self.d_thresh <= 0:
            raise ValueError(f"d_thresh must be > 0, got {self.d_thresh}")
        if not 0 < self.binarize_threshold < 1:
            raise ValueError(
                f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}"
            )
        return self


def label_components(mask):
    """Label 8-connected foreground components, raster-ordered ids."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    binary = (mask > 0).astype(np.uint8)
    labels, count = kernels.label_components(binary)
    if count == 0:
        return LabeledMask(labels, [], [])
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=count + 1)[1:]
    ys, xs = np.nonzero(labels)
    ids = labels[ys, xs]
    sx = np.bincount(ids, weights=xs, minlength=count + 1)[1:]
    sy = np.bincount(ids, weights=ys, minlength=count + 1)[1:]
    centroids = [(sx[i] / areas[i], sy[i] / areas[i]) for i in range(count)]
    return LabeledMask(labels, centroids, [int(a) for a in areas])


def match_targets(pred: LabeledMask, gt: LabeledMask, cfg: MatchConfig = None):
    """Greedy nearest-centroid matching.

    Returns (correct ground-truth count, list of unmatched predicted
    component ids, 1-based).
    """
    cfg = (cfg or MatchConfig()).validate()
    np_, ng = pred.count, gt.count
    if np_ == 0 or ng == 0:
        return 0, list(range(1, np_ + 1))
    pairs = []
    for gi, (gx, gy) in enumerate(gt.centroids):
        for pi, (px, py) in enumerate(pred.centroids):
            d = math.hypot(gx - px, gy - py)
            if d <= cfg.d_thresh:
                pairs.append((d, gi, pi))
    pairs.sort()
    gt_used = [False] * ng
    pred_used = [False] * np_
    correct = 0
    for _, gi, pi in pairs:
        if not gt_used[gi] and not pred_used[pi]:
            gt_used[gi] = True
            pred_used[pi] = True
            correct += 1
    false_ids = [i + 1 for i, used in enumerate(pred_used) if not used]
    return correct, false_ids


@dataclass
class MetricAccumulator:
    inter_px: int = 0
    union_px: int = 0
    correct_targets: int = 0
    total_targets: int = 0
    false_pixels: int = 0
    total_pixels: int = 0

    def add_image(self, pred_mask, gt_mask, cfg: MatchConfig = None):
        """Accumulate one binary prediction/ground-truth pair."""
        pred_mask = np.asarray(pred_mask) > 0
        gt_mask = np.asarray(gt_mask) > 0
        if pred_mask.shape != gt_mask.shape:
            raise ValueError(
                f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}"
            )
        self.inter_px += int((pred_mask & gt_mask).sum())
        self.union_px += int((pred_mask | gt_mask).sum())
        self.total_pixels += pred_mask.size
        pred_l = label_components(pred_mask)
        gt_l = label_components(gt_mask)
        correct, false_ids = match_targets(pred_l, gt_l, cfg)
        self.correct_targets += correct
        self.total_targets += gt_l.count
        self.false_pixels += sum(pred_l.areas[i - 1] for i in false_ids)
        return self

    def merge(self, other):
        self.inter_px += other.inter_px
        self.union_px += other.union_px
        self.correct_targets += other.correct_targets
        self.total_targets += other.total_targets
        self.false_pixels += other.false_pixels
        self.total_pixels += other.total_pixels
        return self


def compute_metrics(acc: MetricAccumulator):
    """(IoU, Pd, Fa) with the empty-scene conventions.

    IoU is 1 when both masks are empty everywhere, Pd is 1 when the ground
    truth holds no targets at all.
    """
    if acc.total_pixels <= 0:
        raise ValueError("accumulator is empty")
    iou = acc.inter_px / acc.union_px if acc.union_px else 1.0
    pd = acc.correct_targets / acc.total_targets if acc.total_targets else 1.0
    fa = acc.false_pixels / acc.total_pixels
    return iou, pd, fa


def evaluate_pair_list(pairs, cfg: MatchConfig = None):
    """Run the full pipeline over (pred_mask, gt_mask) pairs."""
    acc = MetricAccumulator()
    for pred_mask, gt_mask in pairs:
        acc.add_image(pred_mask, gt_mask, cfg)
    return compute_metrics(acc)


def roc_sweep(prob_maps, gt_masks, thresholds, cfg: MatchConfig = None):
    """One (Fa, Pd) operating point per threshold, using the full pipeline.

    ``thresholds`` must be strictly descending within (0, 1). Returns rows
    (threshold, fa, pd).
    """
    thresholds = list(thresholds)
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"thresholds must lie in (0, 1), got {t}")
    if any(a <= b for a, b in zip(thresholds[1:], thresholds)):
        raise ValueError(f"thresholds must be strictly descending: {thresholds}")
    if len(prob_maps) != len(gt_masks):
        raise ValueError("prob_maps and gt_masks differ in length")
    rows = []
    for t in thresholds:
        iou, pd, fa = evaluate_pair_list(
            ((np.asarray(p) > t, g) for p, g in zip(prob_maps, gt_masks)), cfg
        )
        rows.append((t, fa, pd))
    return rows


def write_metrics_csv(path, iou, pd, fa):
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric,value\n")
        f.write(f"iou,{iou:.10g}\n")
        f.write(f"pd,{pd:.10g}\n")
        f.write(f"fa,{fa:.10g}\n")


def write_roc_csv(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write("threshold,fa,pd\n")
        for t, fa, pd in rows:
            f.write(f"{t:.10g},{fa:.10g},{pd:.10g}\n")
