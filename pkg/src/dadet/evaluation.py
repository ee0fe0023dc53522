"""Detection metrics: IoU, per-class average precision, mAP at IoU thresholds.

AP uses greedy score-ordered matching (each ground-truth box matched at most
once, PASCAL style) and all-point interpolation via the precision envelope.
Score ties are broken by input order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Box = tuple[float, float, float, float]


class InvalidBoxError(ValueError):
    """A box with non-positive extent."""


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    cls: int
    score: float

    def __post_init__(self):
        _check_box(self.box)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: Box
    cls: int

    def __post_init__(self):
        _check_box(self.box)


@dataclass
class EvalResult:
    """Per-class AP, mAP and match counts, keyed by IoU threshold."""

    thresholds: tuple[float, ...]
    ap: dict[float, dict[int, float]] = field(default_factory=dict)
    counts: dict[float, dict[int, tuple[int, int, int]]] = field(default_factory=dict)  # (tp, fp, fn)

    def map_at(self, thr: float) -> float:
        per_class = self.ap[thr]
        if not per_class:
            return 0.0
        return float(np.mean(list(per_class.values())))


def _check_box(box: Box) -> None:
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise InvalidBoxError(f"degenerate box {box}: need x1 < x2 and y1 < y2")


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes in continuous coordinates."""
    _check_box(a)
    _check_box(b)
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _match_flags(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_thr: float,
) -> tuple[list[bool], int]:
    """Greedy matching in score order; returns per-detection TP flags.

    Detections are processed by descending score (ties keep input order);
    each one matches the highest-IoU unmatched ground truth of its image,
    subject to IoU >= iou_thr.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    gt_by_image: dict[str, list[int]] = {}
    for j, gt in enumerate(ground_truths):
        gt_by_image.setdefault(gt.image_id, []).append(j)
    matched = [False] * len(ground_truths)
    flags = [False] * len(detections)
    for i in order:
        det = detections[i]
        best_j, best_iou = -1, 0.0
        for j in gt_by_image.get(det.image_id, ()):
            if matched[j]:
                continue
            v = iou(det.box, ground_truths[j].box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            matched[best_j] = True
            flags[i] = True
    tp_order = [flags[i] for i in order]
    return tp_order, len(ground_truths)


def average_precision(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_thr: float,
) -> float:
    """All-point interpolated AP for one class at one IoU threshold."""
    if not ground_truths:
        return 0.0
    if not detections:
        return 0.0
    tp_flags, n_gt = _match_flags(detections, ground_truths, iou_thr)
    tp = np.cumsum([1.0 if f else 0.0 for f in tp_flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in tp_flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope + area under the stepwise PR curve
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def evaluate(
    detections: Iterable[Detection],
    ground_truths: Iterable[GroundTruth],
    thresholds: Sequence[float],
) -> EvalResult:
    """Per-class AP and mAP at each threshold; zero-GT classes are skipped."""
    detections = list(detections)
    ground_truths = list(ground_truths)
    thresholds = tuple(thresholds)
    for thr in thresholds:
        if not 0.0 < thr < 1.0:
            raise ValueError(f"IoU threshold must lie in (0, 1), got {thr}")
    classes = sorted({gt.cls for gt in ground_truths})
    result = EvalResult(thresholds=thresholds)
    for thr in thresholds:
        result.ap[thr] = {}
        result.counts[thr] = {}
        for cls in classes:
            dets_c = [d for d in detections if d.cls == cls]
            gts_c = [g for g in ground_truths if g.cls == cls]
            result.ap[thr][cls] = average_precision(dets_c, gts_c, thr)
            flags, n_gt = _match_flags(dets_c, gts_c, thr)
            tp = sum(flags)
            result.counts[thr][cls] = (tp, len(flags) - tp, n_gt - tp)
    return result


def write_eval_csv(path, result: EvalResult, class_names: Sequence[str], config: dict | None = None) -> None:
    """CSV table keyed by class x threshold, with mAP rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["class", "iou_thr", "ap", "tp", "fp", "fn"])
        for thr in result.thresholds:
            for cls, ap in sorted(result.ap[thr].items()):
                name = class_names[cls] if cls < len(class_names) else str(cls)
                tp, fp, fn = result.counts[thr][cls]
                writer.writerow([name, thr, f"{ap:.6f}", tp, fp, fn])
            writer.writerow(["mAP", thr, f"{result.map_at(thr):.6f}", "", "", ""])


def write_detections_jsonl(path, detections: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps({
                "image_id": det.image_id,
                "cls": det.cls,
                "score": det.score,
                "box": list(det.box),
            }) + "\n")


def read_detections_jsonl(path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(Detection(rec["image_id"], tuple(rec["box"]), rec["cls"], rec["score"]))
    return out
