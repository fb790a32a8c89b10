"""COCO-style detection metrics: IoU, greedy matching, 101-point AP,
mAP over IoU 0.50:0.05:0.95, mAP@0.5 and mAR with a 100-detection cap.

Boxes are ``(x_min, y_min, x_max, y_max)``. Class means are unweighted.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

COCO_THRESHOLDS = tuple(float(t) for t in np.linspace(0.5, 0.95, 10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


class DegenerateBoxError(ValueError):
    pass


@dataclass
class DetectionResult:
    """Detections (or ground truth, with ``scores`` all 1) for one image."""

    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if self.scores is None:
            self.scores = np.ones(len(self.class_ids))
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.boxes)
        if len(self.class_ids) != n or len(self.scores) != n:
            raise ValueError("boxes, class_ids and scores must have equal length")
        if n and not np.all((self.boxes[:, 0] < self.boxes[:, 2]) & (self.boxes[:, 1] < self.boxes[:, 3])):
            raise DegenerateBoxError("every box needs x_min < x_max and y_min < y_max")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_list(cls, items: Iterable[Mapping]) -> "DetectionResult":
        items = list(items)
        return cls(
            [it["box"] for it in items],
            [it["class_id"] for it in items],
            [it.get("score", 1.0) for it in items],
        )

    @classmethod
    def empty(cls) -> "DetectionResult":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.boxes)

    def select(self, class_id: int) -> "DetectionResult":
        m = self.class_ids == class_id
        return DetectionResult(self.boxes[m], self.class_ids[m], self.scores[m])

    def top(self, k: int) -> "DetectionResult":
        order = np.argsort(-self.scores, kind="mergesort")[:k]
        return DetectionResult(self.boxes[order], self.class_ids[order], self.scores[order])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes."""
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise DegenerateBoxError(f"degenerate box {tuple(box)}")
    return float(_kernels.iou_matrix(np.asarray([a]), np.asarray([b]))[0, 0])


@dataclass
class MatchResult:
    order: np.ndarray  # detection indices in descending-score order
    tp: np.ndarray  # bool, aligned with ``order``
    gt_index: np.ndarray  # matched GT index per ordered detection, -1 if FP

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(int(d), int(g)) for d, g in zip(self.order, self.gt_index) if g >= 0]


def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh: float) -> MatchResult:
    """Greedy COCO matching for one image and one class.

    Detections are visited by descending score (stable for ties); each
    takes the unmatched ground-truth box of highest IoU if that IoU is at
    least ``iou_thresh``.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-det_scores, kind="mergesort")
    ious = _kernels.iou_matrix(det_boxes[order], gt_boxes)
    gt_index = _kernels.greedy_match(ious, iou_thresh)
    return MatchResult(order, gt_index >= 0, gt_index)


def average_precision(labels, scores, n_gt: int) -> float | None:
    """101-point interpolated AP.

    ``labels`` marks each detection TP (True) or FP. Returns ``None`` when
    there is neither ground truth nor any detection (the class is then
    excluded from means) and 0.0 when detections exist without ground truth.
    """
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return 0.0 if len(labels) else None
    if len(labels) == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = labels[order]
    tpc = np.cumsum(tp).astype(np.float64)
    fpc = np.cumsum(~tp).astype(np.float64)
    recall = tpc / n_gt
    precision = tpc / (tpc + fpc)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


@dataclass
class EvalReport:
    thresholds: list[float]
    class_ids: list[int]
    ap: dict[int, list[float]]
    class_map: dict[int, float]
    class_map50: dict[int, float]
    class_mar100: dict[int, float | None]
    map: float
    map50: float
    mar100: float
    class_names: dict[int, str] = field(default_factory=dict)

    def name(self, c: int) -> str:
        return self.class_names.get(c, f"class_{c}")

    def to_dict(self) -> dict:
        return {
            "thresholds": [round(t, 2) for t in self.thresholds],
            "overall": {"mAP": self.map, "mAP50": self.map50, "mAR100": self.mar100},
            "classes": [
                {
                    "class_id": c,
                    "name": self.name(c),
                    "mAP": self.class_map[c],
                    "mAP50": self.class_map50[c],
                    "mAR100": self.class_mar100[c],
                    "AP_per_threshold": self.ap[c],
                }
                for c in self.class_ids
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "mAP", "mAP50", "mAR100"])
        for c in self.class_ids:
            ar = self.class_mar100[c]
            w.writerow([self.name(c), f"{self.class_map[c]:.6f}", f"{self.class_map50[c]:.6f}",
                        "" if ar is None else f"{ar:.6f}"])
        w.writerow(["overall", f"{self.map:.6f}", f"{self.map50:.6f}", f"{self.mar100:.6f}"])
        return buf.getvalue()


def _class_tallies(dets, gts, class_id, thresholds, max_dets=None):
    """Per threshold: concatenated TP flags and scores over images, plus n_gt."""
    flags = [[] for _ in thresholds]
    scores = []
    n_gt = 0
    for d_img, g_img in zip(dets, gts):
        if max_dets is not None:
            d_img = d_img.top(max_dets)
        d = d_img.select(class_id)
        g = g_img.select(class_id)
        n_gt += len(g)
        if not len(d):
            continue
        order = np.argsort(-d.scores, kind="mergesort")
        scores.append(d.scores[order])
        ious = _kernels.iou_matrix(d.boxes[order], g.boxes)
        for ti, t in enumerate(thresholds):
            flags[ti].append(_kernels.greedy_match(ious, t) >= 0)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = [np.concatenate(f) if f else np.zeros(0, dtype=bool) for f in flags]
    return flags, scores, n_gt


def _check_inputs(dets, gts):
    dets, gts = list(dets), list(gts)
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} ground-truth images")
    return dets, gts


def mean_ar_100(dets, gts, thresholds: Sequence[float] = COCO_THRESHOLDS, max_dets: int = MAX_DETS) -> float:
    """Recall with the top ``max_dets`` detections per image, averaged over
    thresholds and then over classes that have ground truth."""
    dets, gts = _check_inputs(dets, gts)
    classes = sorted({int(c) for g in gts for c in g.class_ids})
    if not classes:
        return 0.0
    per_class = []
    for c in classes:
        flags, _, n_gt = _class_tallies(dets, gts, c, thresholds, max_dets)
        per_class.append(np.mean([f.sum() / n_gt for f in flags]))
    return float(np.mean(per_class))


def mean_ap(
    dets,
    gts,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    class_names: Mapping[int, str] | None = None,
    classes: Iterable[int] | None = None,
) -> EvalReport:
    """Full report: per-class AP at each threshold, mAP over thresholds,
    mAP@0.5 and mAR_100. Classes absent from both ground truth and
    detections are excluded from the class means."""
    dets, gts = _check_inputs(dets, gts)
    thresholds = [float(t) for t in thresholds]
    gt_classes = {int(c) for g in gts for c in g.class_ids}
    if not gt_classes:
        raise ValueError("no ground-truth boxes in any image")
    present = gt_classes | {int(c) for d in dets for c in d.class_ids}
    if classes is not None:
        present &= {int(c) for c in classes}
    i50 = int(np.argmin(np.abs(np.asarray(thresholds) - 0.5)))

    ap, cmap, cmap50, car = {}, {}, {}, {}
    for c in sorted(present):
        flags, scores, n_gt = _class_tallies(dets, gts, c, thresholds)
        per_t = [average_precision(f, scores, n_gt) for f in flags]
        if per_t[0] is None:
            continue
        ap[c] = [float(v) for v in per_t]
        cmap[c] = float(np.mean(per_t))
        cmap50[c] = ap[c][i50]
        if n_gt:
            capped, _, _ = _class_tallies(dets, gts, c, thresholds, MAX_DETS)
            car[c] = float(np.mean([f.sum() / n_gt for f in capped]))
        else:
            car[c] = None
    ids = sorted(ap)
    ars = [v for v in car.values() if v is not None]
    return EvalReport(
        thresholds=thresholds,
        class_ids=ids,
        ap=ap,
        class_map=cmap,
        class_map50=cmap50,
        class_mar100=car,
        map=float(np.mean([cmap[c] for c in ids])),
        map50=float(np.mean([cmap50[c] for c in ids])),
        mar100=float(np.mean(ars)) if ars else 0.0,
        class_names=dict(class_names or {}),
    )
