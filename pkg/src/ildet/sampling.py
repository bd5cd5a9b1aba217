"""Proposal labelling, Fast R-CNN minibatch composition and selection of
distillation RoIs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import boxes as box_ops
from .kernel import softmax
from .losses import DistillationRecord, RoiTarget
from .model import ClassSet, FrozenSnapshot, ValidationError

FG_IOU = 0.5
BG_IOU_LO = 0.1


@dataclass
class ProposalLabels:
    labels: np.ndarray        # class id per proposal, 0 = background
    bbox_targets: np.ndarray  # [n, 4] zero rows for background
    max_iou: np.ndarray       # best IoU with a visible gt box

    def targets(self) -> List[RoiTarget]:
        return [RoiTarget(int(k), t if k else None) for k, t in zip(self.labels, self.bbox_targets)]


def label_proposals(scene, eligible_classes: Sequence[int], fg_iou: float = FG_IOU) -> ProposalLabels:
    """Assign each proposal the class of its best-overlapping visible gt box.

    Only gt boxes of ``eligible_classes`` are visible; a proposal is
    foreground when that best IoU is at least ``fg_iou``.
    """
    n = scene.n_proposals
    gt_classes, gt_boxes = scene.gt_of(eligible_classes)
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt_boxes) == 0 or n == 0:
        return ProposalLabels(labels, targets, np.zeros(n))
    ious = box_ops.iou_matrix(scene.proposal_boxes, gt_boxes)
    best = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best]
    fg = max_iou >= fg_iou
    labels[fg] = gt_classes[best[fg]]
    if fg.any():
        targets[fg] = box_ops.encode(scene.proposal_boxes[fg], gt_boxes[best[fg]])
    return ProposalLabels(labels, targets, max_iou)


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray         # logit columns, 0 = background
    bbox_targets: np.ndarray
    scene_index: np.ndarray    # which image of the batch each row came from
    proposal_ids: np.ndarray
    fg_counts: List[int]
    bg_counts: List[int]

    def __len__(self):
        return len(self.labels)


def _draw(rng, candidates: np.ndarray, k: int) -> np.ndarray:
    if k <= 0 or candidates.size == 0:
        return np.zeros(0, dtype=np.int64)
    replace = candidates.size < k
    return rng.choice(candidates, size=k, replace=replace)


def sample_rois(labels: ProposalLabels, rng, rois_per_image: int = 64, fg_per_image: int = 16,
                bg_lo: float = BG_IOU_LO):
    """Indices of the foreground and background RoIs drawn from one image."""
    n = len(labels.labels)
    if n == 0:
        raise ValidationError("image has no proposals")
    fg_cand = np.flatnonzero(labels.labels >= 1)
    bg = labels.labels == 0
    bg_cand = np.flatnonzero(bg & (labels.max_iou >= bg_lo) & (labels.max_iou < FG_IOU))
    if bg_cand.size == 0:
        bg_cand = np.flatnonzero(bg)
    n_fg = fg_per_image if fg_cand.size else 0
    if bg_cand.size == 0:
        n_fg = rois_per_image
    fg_idx = _draw(rng, fg_cand, n_fg)
    bg_idx = _draw(rng, bg_cand, rois_per_image - n_fg)
    return fg_idx, bg_idx


def compose_training_batch(scenes, labels: Sequence[ProposalLabels], class_set: ClassSet, seed,
                           rois_per_image: int = 64, fg_per_image: int = 16,
                           bg_lo: float = BG_IOU_LO) -> LabeledBatch:
    """Image-centric minibatch: ``rois_per_image`` RoIs per scene, ``fg_per_image``
    of them foreground (resampled with replacement when scarce)."""
    rng = np.random.default_rng(seed)
    lut = np.zeros(max(class_set.all, default=0) + 1, dtype=np.int64)
    for c in class_set.all:
        lut[c] = class_set.column(c)
    feats, cols, targets, which, ids = [], [], [], [], []
    fg_counts, bg_counts = [], []
    for i, (scene, lab) in enumerate(zip(scenes, labels)):
        fg_idx, bg_idx = sample_rois(lab, rng, rois_per_image, fg_per_image, bg_lo)
        idx = np.concatenate([fg_idx, bg_idx])
        feats.append(scene.features[idx])
        k = lab.labels[idx]
        if k.size and (k.max() >= lut.size or np.any(lut[k[k > 0]] == 0)):
            raise ValidationError(f"labels {np.unique(k)} are not all in class set {class_set.all}")
        cols.append(lut[k])
        targets.append(lab.bbox_targets[idx])
        which.append(np.full(idx.size, i, dtype=np.int64))
        ids.append(scene.proposal_ids[idx])
        fg_counts.append(int(fg_idx.size))
        bg_counts.append(int(bg_idx.size))
    return LabeledBatch(np.concatenate(feats), np.concatenate(cols), np.concatenate(targets),
                        np.concatenate(which), np.concatenate(ids), fg_counts, bg_counts)


def background_scores(frozen: FrozenSnapshot, scene, use_cache: bool = True):
    logits, deltas = frozen.responses(scene, use_cache=use_cache)
    return softmax(logits)[:, 0], logits, deltas


def _record(frozen, scene, picked, logits, deltas, include_background):
    return DistillationRecord.from_teacher(
        scene.proposal_ids[picked], logits[picked], deltas[picked], frozen.class_set,
        include_background, scene.id)


def distillation_pool(frozen: FrozenSnapshot, scene, n_pool: int = 128, use_cache: bool = True):
    """Proposal indices with the ``n_pool`` lowest teacher background scores (ties by id)."""
    bg, _, _ = background_scores(frozen, scene, use_cache)
    order = np.lexsort((scene.proposal_ids, bg))
    return order[:n_pool]


def select_distillation_rois(frozen: FrozenSnapshot, scene, n_pool: int = 128, n_pick: int = 64,
                             seed=None, include_background: bool = True,
                             use_cache: bool = True) -> DistillationRecord:
    """Biased selection: ``n_pick`` RoIs drawn uniformly from the ``n_pool``
    proposals the teacher considers least likely to be background."""
    if scene.n_proposals < n_pick:
        raise ValidationError(f"scene {scene.id} has {scene.n_proposals} proposals, need {n_pick}")
    rng = np.random.default_rng(seed)
    bg, logits, deltas = background_scores(frozen, scene, use_cache)
    order = np.lexsort((scene.proposal_ids, bg))
    pool = order[:max(n_pool, n_pick)]
    picked = rng.choice(pool, size=n_pick, replace=False)
    return _record(frozen, scene, picked, logits, deltas, include_background)


def select_unbiased_rois(frozen: FrozenSnapshot, scene, n_pick: int = 64, seed=None,
                         include_background: bool = True, use_cache: bool = True) -> DistillationRecord:
    """Unbiased selection: ``n_pick`` RoIs uniformly from all proposals."""
    if scene.n_proposals < n_pick:
        raise ValidationError(f"scene {scene.id} has {scene.n_proposals} proposals, need {n_pick}")
    rng = np.random.default_rng(seed)
    logits, deltas = frozen.responses(scene, use_cache=use_cache)
    picked = rng.choice(scene.n_proposals, size=n_pick, replace=False)
    return _record(frozen, scene, picked, logits, deltas, include_background)
