"""Detection evaluation: greedy matching, 11-point AP, mAP@.5 and mAP@.5:.95.

The matching rule is the PASCAL VOC convention: predictions of one class are
ranked by descending confidence across the whole image set, each prediction
greedily claims the unmatched ground-truth box (same image) with the highest
IoU at or above the threshold, and every ground-truth box may be claimed at
most once. AP is the 11-point interpolated area under the resulting
precision-recall sweep, and both mAP variants are plain arithmetic means of
their constituent APs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .geometry import Detection, GroundTruthBox, iou

#: IoU thresholds behind mAP@.5:.95 (0.50 to 0.95, step 0.05).
COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

RECALL_GRID: tuple[float, ...] = tuple(i / 10 for i in range(11))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


@dataclass(frozen=True)
class MatchResult:
    """TP/FP flags in descending-score order plus the aggregate counts."""

    flags: list[bool]
    scores: list[float]
    counts: ConfusionCounts


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) points swept in descending-score order."""

    points: list[tuple[float, float]]


def match(
    preds: Sequence[tuple[str, Detection]],
    gts: Sequence[GroundTruthBox],
    iou_threshold: float,
) -> MatchResult:
    """Match one class's predictions against its ground truth.

    preds are (image_id, detection) pairs; gts carry their own image ids.
    Ties on score keep input order.
    """
    gt_by_image: dict[str, list[GroundTruthBox]] = {}
    for gt in gts:
        gt_by_image.setdefault(gt.image_id, []).append(gt)
    claimed: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gt_by_image.items()}

    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1].score, i))
    flags: list[bool] = []
    scores: list[float] = []
    for i in order:
        image_id, det = preds[i]
        scores.append(det.score)
        candidates = gt_by_image.get(image_id, [])
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(candidates):
            if claimed[image_id][j]:
                continue
            overlap = iou(det.bbox, gt.bbox)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0:
            claimed[image_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)

    tp = sum(flags)
    return MatchResult(flags, scores, ConfusionCounts(tp, len(flags) - tp, len(gts) - tp))


def pr_curve(flags: Sequence[bool], total_gt: int) -> PRCurve:
    """Precision-recall sweep over ranked TP/FP flags."""
    if total_gt < 1:
        raise ValueError("PR curve undefined without ground truth")
    points = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += int(flag)
        points.append((tp / total_gt, tp / k))
    return PRCurve(points)


def ap_11point(flags: Sequence[bool], total_gt: int) -> float:
    """11-point interpolated average precision.

    Interpolated precision at recall r is the maximum precision over all
    sweep points whose recall is at least r (0 when no point reaches r);
    AP averages it over the recall grid {0.0, 0.1, ..., 1.0}.
    """
    if total_gt < 1:
        raise ValueError("AP undefined without ground truth")
    points = pr_curve(flags, total_gt).points
    # envelope: for each sweep point, the max precision at or after it
    envelope: list[tuple[float, float]] = []
    best = 0.0
    for recall, precision in reversed(points):
        best = max(best, precision)
        envelope.append((recall, best))
    envelope.reverse()

    total = 0.0
    for r in RECALL_GRID:
        interp = 0.0
        for recall, best_precision in envelope:
            if recall >= r:
                interp = best_precision
                break
        total += interp
    return total / len(RECALL_GRID)


def macro_mean(values: Sequence[float]) -> float:
    """Arithmetic mean used for every mAP aggregation."""
    if not values:
        raise ValueError("mean of no values")
    return sum(values) / len(values)


@dataclass
class EvalReport:
    """Per-class APs with their aggregates, mirroring a results-table row set."""

    categories: list[str]
    thresholds: list[float]
    #: class_id -> AP at each threshold (classes with ground truth only)
    ap_per_class: dict[int, dict[float, float]]
    zero_gt_classes: list[int]
    confusion50: dict[int, ConfusionCounts]
    gt_counts: dict[int, int] = field(default_factory=dict)

    def map_at(self, threshold: float) -> float:
        return macro_mean([aps[threshold] for aps in self.ap_per_class.values()])

    @property
    def map50(self) -> float:
        return self.map_at(0.5)

    @property
    def map5095(self) -> float:
        return macro_mean([self.map_at(t) for t in COCO_THRESHOLDS])

    def ap5095_for(self, class_id: int) -> float:
        return macro_mean([self.ap_per_class[class_id][t] for t in COCO_THRESHOLDS])

    @property
    def recall50(self) -> float:
        """Aggregate recall at IoU 0.5 over every class with ground truth."""
        tp = sum(c.tp for c in self.confusion50.values())
        fn = sum(c.fn for c in self.confusion50.values())
        return tp / (tp + fn) if tp + fn else 0.0

    @property
    def has_canonical_thresholds(self) -> bool:
        return all(t in self.thresholds for t in COCO_THRESHOLDS)

    def to_dict(self) -> dict:
        canonical = self.has_canonical_thresholds
        rows = []
        for class_id, name in enumerate(self.categories):
            if class_id in self.zero_gt_classes:
                rows.append({"class_id": class_id, "name": name, "gt_count": 0, "no_gt": True})
                continue
            counts = self.confusion50[class_id]
            row = {
                "class_id": class_id,
                "name": name,
                "gt_count": self.gt_counts.get(class_id, 0),
                "ap": {f"{t:.2f}": self.ap_per_class[class_id][t] for t in self.thresholds},
                "tp": counts.tp,
                "fp": counts.fp,
                "fn": counts.fn,
            }
            if canonical:
                row["ap50"] = self.ap_per_class[class_id][0.5]
                row["ap5095"] = self.ap5095_for(class_id)
            rows.append(row)
        out = {
            "categories": list(self.categories),
            "thresholds": [f"{t:.2f}" for t in self.thresholds],
            "per_class": rows,
            "recall50": self.recall50,
            "zero_gt_classes": list(self.zero_gt_classes),
        }
        if canonical:
            out["map50"] = self.map50
            out["map5095"] = self.map5095
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(
    preds_by_image: Mapping[str, Sequence[Detection]],
    gts: Sequence[GroundTruthBox],
    categories: Sequence[str],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> EvalReport:
    """Full evaluation across classes and IoU thresholds.

    Classes without any ground truth in the set are excluded from the means
    and flagged in the report instead of scoring zero.
    """
    if not gts:
        raise ValueError("evaluation needs at least one ground-truth box")
    if not thresholds:
        raise ValueError("at least one IoU threshold required")
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"IoU threshold outside (0, 1): {t}")
    n_classes = len(categories)
    for gt in gts:
        if gt.class_id >= n_classes:
            raise ValueError(f"ground-truth class {gt.class_id} outside {n_classes} categories")

    preds_by_class: dict[int, list[tuple[str, Detection]]] = {c: [] for c in range(n_classes)}
    for image_id, dets in preds_by_image.items():
        for det in dets:
            if det.class_id >= n_classes:
                raise ValueError(f"prediction class {det.class_id} outside {n_classes} categories")
            preds_by_class[det.class_id].append((image_id, det))
    gts_by_class: dict[int, list[GroundTruthBox]] = {c: [] for c in range(n_classes)}
    for gt in gts:
        gts_by_class[gt.class_id].append(gt)

    confusion_threshold = 0.5 if 0.5 in thresholds else thresholds[0]
    ap_per_class: dict[int, dict[float, float]] = {}
    confusion50: dict[int, ConfusionCounts] = {}
    zero_gt: list[int] = []
    gt_counts: dict[int, int] = {}
    for class_id in range(n_classes):
        class_gts = gts_by_class[class_id]
        gt_counts[class_id] = len(class_gts)
        if not class_gts:
            zero_gt.append(class_id)
            continue
        aps: dict[float, float] = {}
        for t in thresholds:
            result = match(preds_by_class[class_id], class_gts, t)
            aps[t] = ap_11point(result.flags, len(class_gts))
            if t == confusion_threshold:
                confusion50[class_id] = result.counts
        ap_per_class[class_id] = aps

    return EvalReport(
        categories=list(categories),
        thresholds=list(thresholds),
        ap_per_class=ap_per_class,
        zero_gt_classes=zero_gt,
        confusion50=confusion50,
        gt_counts=gt_counts,
    )


def render_table(report: EvalReport) -> str:
    """Plain-text results table: one row per class plus the all-class row."""
    if not report.has_canonical_thresholds:
        raise ValueError("table rendering needs the 0.5:0.95 threshold set")
    name_width = max([len(n) for n in report.categories] + [len("all"), 5])
    lines = [f"{'class':<{name_width}}  {'mAP@.5:.95':>10}  {'mAP@.5':>8}"]
    for class_id, name in enumerate(report.categories):
        if class_id in report.zero_gt_classes:
            lines.append(f"{name:<{name_width}}  {'(no gt)':>10}  {'(no gt)':>8}")
            continue
        ap5095 = 100.0 * report.ap5095_for(class_id)
        ap50 = 100.0 * report.ap_per_class[class_id][0.5]
        lines.append(f"{name:<{name_width}}  {ap5095:>10.1f}  {ap50:>8.1f}")
    lines.append(
        f"{'all':<{name_width}}  {100.0 * report.map5095:>10.1f}  {100.0 * report.map50:>8.1f}"
    )
    return "\n".join(lines)
