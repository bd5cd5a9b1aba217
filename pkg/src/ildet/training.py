"""SGD training loop shared by every experiment protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .kernel import OptimizerConfig, sgd_nesterov_step
from .losses import (
    DistillationRecord,
    FisherDiagonal,
    crossentropy_distillation_loss,
    distillation_loss,
    ewc_penalty,
    frcnn_loss,
    joint_loss,
)
from .model import DetectorModel, FrozenSnapshot, ValidationError
from .sampling import (
    BG_IOU_LO,
    compose_training_batch,
    label_proposals,
    select_distillation_rois,
    select_unbiased_rois,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class Schedule:
    steps: int
    learning_rate: float
    decay_step: Optional[int] = None
    decayed_rate: Optional[float] = None

    def rate(self, step: int) -> float:
        if self.decay_step is not None and step >= self.decay_step:
            return self.decayed_rate
        return self.learning_rate


@dataclass
class BatchSettings:
    images: int = 2
    rois_per_image: int = 64
    fg_per_image: int = 16
    bg_lo: float = BG_IOU_LO


@dataclass
class Distillation:
    teacher: FrozenSnapshot
    lam: float = 1.0
    form: str = "l2"
    include_bbox: bool = True
    biased: bool = True
    n_pool: int = 128
    n_pick: int = 64
    include_background: bool = True
    use_cache: bool = True

    def __post_init__(self):
        if self.form not in ("l2", "ce"):
            raise ValidationError(f"unknown distillation form {self.form!r}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be non-negative, got {self.lam}")

    def select(self, scene, rng) -> DistillationRecord:
        if self.biased:
            return select_distillation_rois(self.teacher, scene, self.n_pool, self.n_pick, rng,
                                            self.include_background, self.use_cache)
        return select_unbiased_rois(self.teacher, scene, self.n_pick, rng,
                                    self.include_background, self.use_cache)

    def loss(self, record, logits, deltas, student_classes):
        fn = distillation_loss if self.form == "l2" else crossentropy_distillation_loss
        return fn(record, logits, deltas, self.include_bbox, student_classes)


@dataclass
class TrainLog:
    losses: List[float] = field(default_factory=list)

    def curve(self, every: int = 50):
        """Mean loss over consecutive windows of ``every`` steps."""
        out = []
        for start in range(0, len(self.losses), every):
            chunk = self.losses[start:start + every]
            out.append((start + len(chunk), float(np.mean(chunk))))
        return out


def _index_stream(n: int, rng):
    while True:
        yield from rng.permutation(n)


def label_scenes(scenes, eligible: Sequence[int]):
    return [label_proposals(s, eligible) for s in scenes]


def train_detector(
    model: DetectorModel,
    scenes,
    eligible: Sequence[int],
    schedule: Schedule,
    optimizer: OptimizerConfig,
    seed: int,
    batch: BatchSettings = BatchSettings(),
    distill: Optional[Distillation] = None,
    masks: Optional[Dict[str, np.ndarray]] = None,
    ewc: Optional[tuple] = None,
    callback: Optional[Callable[[int, DetectorModel], None]] = None,
    callback_every: int = 0,
    labels=None,
) -> TrainLog:
    """Train ``model`` in place on ``scenes`` with annotations of ``eligible`` only.

    The scene order, RoI sampling and distillation selection draw from three
    independent streams seeded by ``seed``, so toggling distillation never
    changes which RoIs the Fast R-CNN term sees.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValidationError("training split is empty")
    if labels is None:
        labels = label_scenes(scenes, eligible)
    order_rng, batch_rng, distill_rng = (np.random.default_rng(s)
                                         for s in np.random.SeedSequence(seed).spawn(3))
    stream = _index_stream(len(scenes), order_rng)
    store = model.store
    store.zero_grad()
    store.reset_velocity()
    out = TrainLog()
    # a diverging run overflows before the finiteness check reports it
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(schedule.steps):
            idx = [next(stream) for _ in range(batch.images)]
            picked = [scenes[i] for i in idx]
            b = compose_training_batch(picked, [labels[i] for i in idx], model.class_set, batch_rng,
                                       batch.rois_per_image, batch.fg_per_image, batch.bg_lo)
            logits, deltas = model.forward(b.features)
            rcnn = frcnn_loss(logits, b.labels, deltas, b.bbox_targets)
            model.backward(rcnn[1], rcnn[2])
            total = rcnn[0]

            if distill is not None:
                records = [distill.select(s, distill_rng) for s in picked]
                record = DistillationRecord.concat(records)
                feats = np.concatenate([s.features[r.roi_ids] for s, r in zip(picked, records)])
                logits, deltas = model.forward(feats)
                dist = distill.loss(record, logits, deltas, model.class_set)
                total, _, (gl, gd) = joint_loss(rcnn, dist, distill.lam)
                model.backward(gl, gd)

            if ewc is not None:
                fisher, strength = ewc
                value, grads = ewc_penalty(model, fisher, strength)
                for k, g in grads.items():
                    store.grads[k] += g
                total += value

            if not np.isfinite(total):
                raise DivergenceError(f"loss became {total} at step {step}")
            out.losses.append(float(total))
            sgd_nesterov_step(store, optimizer, schedule.rate(step), masks)
            if callback is not None and callback_every and (step + 1) % callback_every == 0:
                callback(step + 1, model)
    return out


def freeze_masks(model: DetectorModel, trunk: bool = False, old_heads: bool = False):
    """Update masks: False entries are excluded from SGD (and weight decay)."""
    masks = {}
    if trunk:
        for name in model.trunk_param_names:
            masks[name] = False
    if old_heads:
        n_old = len(model.class_set.old)
        for name, cols in (("cls", n_old + 1), ("bbox", 4 * n_old)):
            for suffix in ("W", "b"):
                p = model.store[f"{name}.{suffix}"]
                m = np.ones(p.shape, dtype=bool)
                m[..., :cols] = False
                masks[f"{name}.{suffix}"] = m
    return masks
