"""Detection metrics: VOC-style AP, mAP@0.5 and COCO-style mAP@[.5:.95]."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import boxes as box_ops
from .boxes import decode, iou, nms  # noqa: F401  re-exported metric primitives
from .model import ClassSet, predict_many

log = logging.getLogger(__name__)

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


def _iou_rows(scene_ids, boxes, gt):
    rows = []
    for sid, box in zip(scene_ids, boxes):
        g = gt.get(int(sid))
        rows.append(box_ops.iou_matrix(box, g)[0] if g is not None and len(g) else np.zeros(0))
    return rows


def _greedy_match(order, scene_ids, rows, gt, iou_threshold):
    taken = {sid: np.zeros(len(b), dtype=bool) for sid, b in gt.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        ious = rows[i]
        if ious.size == 0:
            continue
        used = taken[int(scene_ids[i])]
        ious = np.where(used, -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            used[j] = True
            tp[rank] = True
    return tp


def match_detections(scene_ids: np.ndarray, boxes: np.ndarray, scores: np.ndarray,
                     gt: Dict[int, np.ndarray], iou_threshold: float = 0.5) -> np.ndarray:
    """True-positive flags of detections visited in descending score order.

    Each detection takes the unmatched gt box it overlaps most, provided
    that IoU reaches ``iou_threshold``; ties in score keep input order.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    return _greedy_match(order, scene_ids, _iou_rows(scene_ids, boxes, gt), gt, iou_threshold)


def ap_from_tp(tp: np.ndarray, n_gt: int, mode: str = "11point") -> float:
    if n_gt == 0:
        return math.nan
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    if mode == "11point":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            p = precision[recall >= t - 1e-12]
            total += p.max() if p.size else 0.0
        return float(total / 11.0)
    if mode == "all":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        idx = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    raise ValueError(f"unknown interpolation mode {mode!r}")


def average_precision(scene_ids, boxes, scores, gt: Dict[int, np.ndarray],
                      iou_threshold: float = 0.5, mode: str = "11point") -> float:
    """AP of one class over a test set; NaN when the class has no gt boxes."""
    n_gt = sum(len(b) for b in gt.values())
    if n_gt == 0:
        return math.nan
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    tp = match_detections(np.asarray(scene_ids), boxes, np.asarray(scores, dtype=np.float64), gt,
                          iou_threshold)
    return ap_from_tp(tp, n_gt, mode)


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class EvalReport:
    ap50: Dict[int, float]
    ap_coco: Dict[int, float]
    n_gt: Dict[int, int]
    n_detections: Dict[int, int]
    class_set: Optional[ClassSet] = None
    score_threshold: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def classes(self) -> List[int]:
        return sorted(self.ap50)

    @property
    def map50(self) -> float:
        return _nanmean(self.ap50.values())

    @property
    def map_coco(self) -> float:
        return _nanmean(self.ap_coco.values())

    def group_map(self, classes: Sequence[int], coco: bool = False) -> float:
        src = self.ap_coco if coco else self.ap50
        return _nanmean(src[c] for c in classes if c in src)

    @property
    def old(self) -> float:
        return self.group_map(self.class_set.old) if self.class_set else math.nan

    @property
    def new(self) -> float:
        return self.group_map(self.class_set.new) if self.class_set else math.nan

    @property
    def all(self) -> float:
        return self.map50

    def rows(self, method: str) -> List[dict]:
        """EvalReport CSV rows: one per class plus old/new/all summary rows."""
        out = [{"method": method, "class": str(c), "AP50": self.ap50[c]} for c in self.classes]
        if self.class_set is not None:
            out.append({"method": method, "class": "old", "AP50": self.old})
            out.append({"method": method, "class": "new", "AP50": self.new})
        out.append({"method": method, "class": "all", "AP50": self.map50})
        return out


def evaluate_detections(detections, scenes, classes: Sequence[int], class_set: Optional[ClassSet] = None,
                        mode: str = "11point", score_threshold: float = 0.5,
                        thresholds: Sequence[float] = COCO_THRESHOLDS) -> EvalReport:
    """Aggregate per-scene :class:`Detections` into per-class AP.

    ``thresholds`` are the IoU levels averaged into the COCO-style figure;
    pass an empty sequence to compute AP at 0.5 only.
    """
    ap50, ap_coco, n_gt, n_det = {}, {}, {}, {}
    for c in classes:
        gt = {s.id: s.gt_boxes[s.gt_classes == c] for s in scenes}
        sids, bxs, scs = [], [], []
        for s, d in zip(scenes, detections):
            m = d.classes == c
            if m.any():
                sids.append(np.full(int(m.sum()), s.id))
                bxs.append(d.boxes[m])
                scs.append(d.scores[m])
        sids = np.concatenate(sids) if sids else np.zeros(0, dtype=np.int64)
        bxs = np.concatenate(bxs) if bxs else np.zeros((0, 4))
        scs = np.concatenate(scs) if scs else np.zeros(0)
        total = sum(len(b) for b in gt.values())
        n_gt[c] = total
        n_det[c] = int(len(scs))
        if total == 0:
            log.warning("class %d has no ground truth in the test set; excluded from mAP", c)
            continue
        order = np.argsort(-scs, kind="stable")
        rows = _iou_rows(sids, bxs, gt)
        ap = {t: ap_from_tp(_greedy_match(order, sids, rows, gt, t), total, mode)
              for t in {0.5, *thresholds}}
        ap50[c] = ap[0.5]
        ap_coco[c] = float(np.mean([ap[t] for t in thresholds])) if len(thresholds) else math.nan
    return EvalReport(ap50, ap_coco, n_gt, n_det, class_set, score_threshold)


def evaluate(model, scenes, classes: Optional[Sequence[int]] = None, class_set: Optional[ClassSet] = None,
             score_threshold: float = 0.5, nms_iou: float = 0.3, mode: str = "11point",
             coco: bool = True) -> EvalReport:
    """Run detection over ``scenes`` and score the requested classes.

    ``model`` is a detector, a frozen snapshot or any object exposing
    ``detect(scenes, score_threshold, nms_iou)``.
    """
    scenes = list(scenes)
    if class_set is None:
        class_set = getattr(model, "class_set", None)
    if classes is None:
        classes = class_set.all
    if hasattr(model, "detect"):
        dets = model.detect(scenes, score_threshold, nms_iou)
    else:
        dets = predict_many(model, scenes, score_threshold, nms_iou, classes)
    return evaluate_detections(dets, scenes, classes, class_set, mode, score_threshold,
                               COCO_THRESHOLDS if coco else ())
