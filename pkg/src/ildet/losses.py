"""Training objectives with analytic gradients.

Every loss returns ``(value, grad_logits, grad_deltas)`` (or a gradient dict
for parameter-space penalties) so callers can feed the model's backward pass.
Batch losses are means over RoIs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import boxes as box_ops
from .kernel import log_softmax, softmax
from .model import ClassSet, DetectorModel, ValidationError

encode_bbox_target = box_ops.encode


@dataclass
class RoiTarget:
    label: int
    bbox_target: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.label >= 1:
            if self.bbox_target is None or not np.all(np.isfinite(self.bbox_target)):
                raise ValidationError("foreground RoI needs a finite 4-vector bbox target")
        elif self.label < 0:
            raise ValidationError(f"negative label {self.label}")


def smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def frcnn_loss(logits: np.ndarray, labels: np.ndarray, deltas: np.ndarray,
               bbox_targets: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean Fast R-CNN loss over RoIs: log-loss plus smooth-L1 on the label's deltas.

    ``labels`` index logit columns (0 = background). ``bbox_targets`` is
    ``[n, 4]``; rows of background RoIs are ignored.
    """
    logits = np.atleast_2d(logits)
    deltas = np.atleast_2d(deltas)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, width = logits.shape
    if deltas.shape != (n, 4 * (width - 1)):
        raise ValidationError(f"deltas shape {deltas.shape} does not match logits {logits.shape}")
    if labels.shape[0] != n or np.any(labels < 0) or np.any(labels >= width):
        raise ValidationError(f"labels must be column indices in [0, {width}), got {labels}")
    if n == 0:
        return 0.0, np.zeros_like(logits), np.zeros_like(deltas)

    rows = np.arange(n)
    logp = log_softmax(logits)
    cls_loss = -logp[rows, labels]
    dlogits = softmax(logits)
    dlogits[rows, labels] -= 1.0

    ddeltas = np.zeros_like(deltas)
    fg = np.flatnonzero(labels >= 1)
    loc_loss = np.zeros(n)
    if fg.size:
        targets = np.asarray(bbox_targets, dtype=np.float64).reshape(n, 4)[fg]
        cols = 4 * (labels[fg] - 1)[:, None] + np.arange(4)[None, :]
        diff = deltas[fg[:, None], cols] - targets
        loc_loss[fg] = smooth_l1(diff).sum(axis=1)
        ddeltas[fg[:, None], cols] = smooth_l1_grad(diff)

    return float(np.mean(cls_loss + loc_loss)), dlogits / n, ddeltas / n


def center(logits: np.ndarray) -> np.ndarray:
    """Subtract the per-row mean over the class dimension."""
    return logits - logits.mean(axis=-1, keepdims=True)


@dataclass
class DistillationRecord:
    """Teacher responses on the RoIs picked for distillation.

    ``logits`` holds the centred teacher logits of the distilled old-head
    columns, ``raw_logits`` the uncentred old head (background included).
    """

    roi_ids: np.ndarray
    logits: np.ndarray
    raw_logits: np.ndarray
    deltas: np.ndarray
    class_set: ClassSet
    include_background: bool = True
    scene_id: int = -1

    @property
    def n_old(self) -> int:
        return len(self.class_set)

    def __len__(self):
        return len(self.roi_ids)

    @classmethod
    def from_teacher(cls, roi_ids, raw_logits, deltas, class_set: ClassSet,
                     include_background: bool = True, scene_id: int = -1):
        raw_logits = np.asarray(raw_logits, dtype=np.float64)
        head = raw_logits if include_background else raw_logits[:, 1:]
        return cls(np.asarray(roi_ids, dtype=np.int64), center(head), raw_logits,
                   np.asarray(deltas, dtype=np.float64), class_set, include_background, scene_id)

    @staticmethod
    def concat(records) -> "DistillationRecord":
        records = list(records)
        first = records[0]
        for r in records[1:]:
            if r.class_set != first.class_set or r.include_background != first.include_background:
                raise ValidationError("cannot concatenate distillation records of different heads")
        return DistillationRecord(
            np.concatenate([r.roi_ids for r in records]),
            np.concatenate([r.logits for r in records]),
            np.concatenate([r.raw_logits for r in records]),
            np.concatenate([r.deltas for r in records]),
            first.class_set, first.include_background, -1)


def _check_student(record: DistillationRecord, logits, deltas, student_classes: Optional[ClassSet]):
    n_old = record.n_old
    if student_classes is not None and student_classes.all[:n_old] != record.class_set.all:
        raise ValidationError(
            f"teacher classes {record.class_set.all} are not the old head of student {student_classes.all}")
    if logits.shape[0] != len(record) or deltas.shape[0] != len(record):
        raise ValidationError("student outputs and distillation record have different RoI counts")
    if logits.shape[1] < n_old + 1 or deltas.shape[1] < 4 * n_old:
        raise ValidationError("student head is narrower than the teacher's")
    if n_old == 0:
        raise ValidationError("teacher has no classes to distil")


def distillation_loss(record: DistillationRecord, logits: np.ndarray, deltas: np.ndarray,
                      include_bbox: bool = True, student_classes: Optional[ClassSet] = None):
    """L2 distillation on centred old-head logits and old-class deltas.

    Sum of squared differences normalised by ``N * |C_A|``. Columns of new
    classes are ignored and receive zero gradient.
    """
    _check_student(record, logits, deltas, student_classes)
    n_old = record.n_old
    norm = len(record) * n_old
    lo = 0 if record.include_background else 1
    diff = center(logits[:, lo:n_old + 1]) - record.logits
    value = np.sum(diff * diff)
    dlogits = np.zeros_like(logits)
    # diff is already zero-mean per row, so the centring projection leaves it unchanged
    dlogits[:, lo:n_old + 1] = 2.0 * diff / norm
    ddeltas = np.zeros_like(deltas)
    if include_bbox:
        ddiff = deltas[:, :4 * n_old] - record.deltas
        value += np.sum(ddiff * ddiff)
        ddeltas[:, :4 * n_old] = 2.0 * ddiff / norm
    return float(value / norm), dlogits, ddeltas


def crossentropy_distillation_loss(record: DistillationRecord, logits: np.ndarray, deltas: np.ndarray,
                                   include_bbox: bool = True, student_classes: Optional[ClassSet] = None):
    """Cross-entropy between teacher and student softmax over the old head (no
    temperature), mean over RoIs, plus the unchanged L2 box term."""
    _check_student(record, logits, deltas, student_classes)
    n_old = record.n_old
    n = len(record)
    q_teacher = softmax(record.raw_logits)
    student = logits[:, :n_old + 1]
    value = float(-np.sum(q_teacher * log_softmax(student)) / n)
    dlogits = np.zeros_like(logits)
    dlogits[:, :n_old + 1] = (softmax(student) - q_teacher) / n
    ddeltas = np.zeros_like(deltas)
    if include_bbox:
        norm = n * n_old
        ddiff = deltas[:, :4 * n_old] - record.deltas
        value += float(np.sum(ddiff * ddiff) / norm)
        ddeltas[:, :4 * n_old] = 2.0 * ddiff / norm
    return value, dlogits, ddeltas


def joint_loss(rcnn, dist, lam: float = 1.0):
    """Combine ``(value, dlogits, ddeltas)`` triples as ``rcnn + lam * dist``.

    The two terms may cover different RoIs, so gradients are returned
    separately: ``(value, rcnn_grads, scaled_dist_grads)``.
    """
    if lam < 0:
        raise ValidationError(f"lambda must be non-negative, got {lam}")
    value = rcnn[0] + lam * dist[0]
    return value, (rcnn[1], rcnn[2]), (lam * dist[1], lam * dist[2])


@dataclass
class FisherDiagonal:
    values: Dict[str, np.ndarray]
    anchor: Dict[str, np.ndarray]

    def __post_init__(self):
        if set(self.values) != set(self.anchor):
            raise ValidationError("Fisher values and anchor parameters have different keys")
        for k, v in self.values.items():
            if v.shape != self.anchor[k].shape:
                raise ValidationError(f"shape mismatch for {k}")
            if np.any(v < 0):
                raise ValidationError(f"negative Fisher entries in {k}")


def estimate_fisher(model: DetectorModel, batches: Iterable) -> FisherDiagonal:
    """Diagonal empirical Fisher: mean over batches of the squared Fast R-CNN gradient.

    Each batch needs ``features``, ``labels`` (logit columns) and ``bbox_targets``.
    The current parameters are recorded as the anchor.
    """
    store = model.store
    acc = {k: np.zeros_like(v) for k, v in store.params.items()}
    count = 0
    saved = {k: g.copy() for k, g in store.grads.items()}
    for batch in batches:
        store.zero_grad()
        logits, deltas = model.forward(batch.features)
        _, dl, dd = frcnn_loss(logits, batch.labels, deltas, batch.bbox_targets)
        model.backward(dl, dd)
        for k, g in store.grads.items():
            acc[k] += g * g
        count += 1
    for k, g in saved.items():
        store.grads[k][...] = g
    if count == 0:
        raise ValidationError("cannot estimate Fisher information from an empty dataset")
    return FisherDiagonal({k: v / count for k, v in acc.items()},
                          {k: v.copy() for k, v in store.params.items()})


def _leading(shape):
    return tuple(slice(0, s) for s in shape)


def ewc_penalty(model: DetectorModel, fisher: FisherDiagonal, strength: float):
    """``strength/2 * sum F (theta - theta*)^2`` and its gradient.

    Head parameters that gained columns through class extension are
    penalised on their leading (pre-extension) block only.
    """
    params = model.store.params
    if set(params) != set(fisher.values):
        raise ValidationError(
            f"Fisher keys {sorted(fisher.values)} do not match model keys {sorted(params)}")
    value = 0.0
    grads = {}
    for k, F in fisher.values.items():
        theta = params[k]
        if F.ndim != theta.ndim or any(f > t for f, t in zip(F.shape, theta.shape)):
            raise ValidationError(f"Fisher shape {F.shape} does not fit parameter {k} {theta.shape}")
        sl = _leading(F.shape)
        d = theta[sl] - fisher.anchor[k]
        value += 0.5 * strength * float(np.sum(F * d * d))
        g = np.zeros_like(theta)
        g[sl] = strength * F * d
        grads[k] = g
    return value, grads
