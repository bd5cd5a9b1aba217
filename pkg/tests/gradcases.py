"""Small random detection heads wired to each loss, for finite-difference checks."""

import numpy as np

from ildet.kernel import grad_check
from ildet.losses import (
    DistillationRecord,
    FisherDiagonal,
    crossentropy_distillation_loss,
    distillation_loss,
    ewc_penalty,
    frcnn_loss,
    joint_loss,
)
from ildet.model import ClassSet, DetectorModel, extend_model

IN_DIM = 5
OLD = (1, 2, 3)
NEW = (4, 5)


def _batch(rng, n, n_classes):
    x = rng.normal(size=(n, IN_DIM))
    labels = rng.integers(0, n_classes + 1, size=n)
    labels[:2] = [0, 1]  # at least one background and one foreground row
    targets = rng.normal(0, 0.5, size=(n, 4))
    return x, labels, targets


def _heads(seed):
    rng = np.random.default_rng(seed)
    teacher = DetectorModel(IN_DIM, ClassSet(OLD), hidden=(6,), seed=seed)
    for v in teacher.store.params.values():
        v += rng.normal(0, 0.3, size=v.shape)  # move away from the tiny head init
    student = extend_model(teacher, NEW, seed=seed + 1)
    for v in student.store.params.values():
        v += rng.normal(0, 0.2, size=v.shape)
    return rng, teacher, student


def _record(teacher, x, include_background=True):
    logits, deltas = teacher.forward(x, cache=False)
    return DistillationRecord.from_teacher(np.arange(len(x)), logits, deltas, teacher.class_set,
                                           include_background)


def frcnn_case(seed):
    rng, _, student = _heads(seed)
    x, labels, targets = _batch(rng, 9, len(student.class_set))

    def loss():
        logits, deltas = student.forward(x)
        value, dl, dd = frcnn_loss(logits, labels, deltas, targets)
        student.backward(dl, dd)
        return value
    return student.store, loss


def distill_case(seed, form="l2", include_bbox=True, include_background=True):
    rng, teacher, student = _heads(seed)
    x = rng.normal(size=(8, IN_DIM))
    record = _record(teacher, x, include_background)
    fn = distillation_loss if form == "l2" else crossentropy_distillation_loss

    def loss():
        logits, deltas = student.forward(x)
        value, dl, dd = fn(record, logits, deltas, include_bbox, student.class_set)
        student.backward(dl, dd)
        return value
    return student.store, loss


def joint_case(seed, lam):
    rng, teacher, student = _heads(seed)
    x, labels, targets = _batch(rng, 7, len(student.class_set))
    xd = rng.normal(size=(6, IN_DIM))
    record = _record(teacher, xd)

    def loss():
        logits, deltas = student.forward(x)
        rcnn = frcnn_loss(logits, labels, deltas, targets)
        student.backward(rcnn[1], rcnn[2])
        logits, deltas = student.forward(xd)
        dist = distillation_loss(record, logits, deltas, student_classes=student.class_set)
        value, _, (gl, gd) = joint_loss(rcnn, dist, lam)
        student.backward(gl, gd)
        return value
    return student.store, loss


def ewc_case(seed, strength=3.0):
    rng, teacher, student = _heads(seed)
    values = {k: rng.uniform(0, 2, size=v.shape) for k, v in teacher.store.params.items()}
    anchor = {k: v + rng.normal(0, 0.5, size=v.shape) for k, v in teacher.store.params.items()}
    fisher = FisherDiagonal(values, anchor)

    def loss():
        value, grads = ewc_penalty(student, fisher, strength)
        for k, g in grads.items():
            student.store.grads[k] += g
        return value
    return student.store, loss


CASES = {
    "frcnn": frcnn_case,
    "distill_l2": distill_case,
    "distill_l2_no_bbox": lambda s: distill_case(s, include_bbox=False),
    "distill_l2_no_background": lambda s: distill_case(s, include_background=False),
    "joint_0.1": lambda s: joint_case(s, 0.1),
    "joint_1": lambda s: joint_case(s, 1.0),
    "joint_10": lambda s: joint_case(s, 10.0),
    "distill_ce": lambda s: distill_case(s, form="ce"),
    "ewc": ewc_case,
}


def worst_error(name, seed):
    store, loss = CASES[name](seed)
    return grad_check(store, loss, tolerance=1e-4, h=1e-5, raise_on_failure=False).worst_error
