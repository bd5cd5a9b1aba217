"""Detection network: shared trunk MLP over per-proposal features feeding two
sibling heads (class logits with background at column 0, per-class box deltas).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from . import boxes as box_ops
from .kernel import (
    DimensionError,
    ParamStore,
    StateError,
    affine_backward,
    affine_forward,
    blocked_affine_forward,
    he_normal,
    relu,
    relu_backward,
    softmax,
)


class ValidationError(ValueError):
    """Invalid configuration or argument combination."""


@dataclass(frozen=True)
class ClassSet:
    old: Tuple[int, ...] = ()
    new: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "old", tuple(int(c) for c in self.old))
        object.__setattr__(self, "new", tuple(int(c) for c in self.new))
        ids = self.old + self.new
        if any(c <= 0 for c in ids):
            raise ValidationError(f"class ids must be positive (0 is background): {ids}")
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate class ids in class set: old={self.old} new={self.new}")

    @property
    def all(self) -> Tuple[int, ...]:
        return self.old + self.new

    def __len__(self):
        return len(self.old) + len(self.new)

    def column(self, class_id: int) -> int:
        """Logit column of a class (background is column 0)."""
        return self.all.index(class_id) + 1


# head init scales of Fast R-CNN; He-scaled heads start with O(1) box deltas
CLS_INIT_STD = 0.01
BBOX_INIT_STD = 0.001


def _layer_names(n_hidden: int):
    return [f"trunk.{i}" for i in range(n_hidden)]


class DetectorModel:
    """Trunk MLP with ReLU hidden layers plus classification and box heads."""

    def __init__(self, in_dim: int, class_set: ClassSet, hidden: Sequence[int] = (64, 64),
                 seed: int = 0, store: Optional[ParamStore] = None):
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.class_set = class_set
        self._cache = None
        if store is not None:
            self.store = store
            self._check_shapes()
            return
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        fan_in = self.in_dim
        for name, width in zip(_layer_names(len(self.hidden)), self.hidden):
            self.store.add(f"{name}.W", he_normal(rng, fan_in, width))
            self.store.add(f"{name}.b", np.zeros(width))
            fan_in = width
        n = len(class_set)
        self.store.add("cls.W", rng.normal(0.0, CLS_INIT_STD, size=(fan_in, n + 1)))
        self.store.add("cls.b", np.zeros(n + 1))
        self.store.add("bbox.W", rng.normal(0.0, BBOX_INIT_STD, size=(fan_in, 4 * n)))
        self.store.add("bbox.b", np.zeros(4 * n))

    @property
    def n_classes(self) -> int:
        return len(self.class_set)

    @property
    def trunk_param_names(self):
        return [f"{name}.{p}" for name in _layer_names(len(self.hidden)) for p in ("W", "b")]

    def _check_shapes(self):
        n = self.n_classes
        width = self.hidden[-1] if self.hidden else self.in_dim
        expected = {"cls.W": (width, n + 1), "cls.b": (n + 1,),
                    "bbox.W": (width, 4 * n), "bbox.b": (4 * n,)}
        fan_in = self.in_dim
        for name, w in zip(_layer_names(len(self.hidden)), self.hidden):
            expected[f"{name}.W"] = (fan_in, w)
            expected[f"{name}.b"] = (w,)
            fan_in = w
        for name, shape in expected.items():
            if name not in self.store or self.store[name].shape != shape:
                got = self.store[name].shape if name in self.store else None
                raise DimensionError(f"parameter {name}: expected shape {shape}, got {got}")

    def forward(self, features: np.ndarray, cache: bool = True):
        """Return ``(logits [n, C+1], deltas [n, 4C])`` for a batch of RoI features."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"features have shape {x.shape}, model expects width {self.in_dim}")
        p = self.store.params
        acts = [x]
        pre = []
        h = x
        for name in _layer_names(len(self.hidden)):
            z = affine_forward(h, p[f"{name}.W"], p[f"{name}.b"])
            h = relu(z)
            pre.append(z)
            acts.append(h)
        # per-class blocks keep old-class outputs bit-identical after extension
        logits = blocked_affine_forward(h, p["cls.W"], p["cls.b"], 1)
        deltas = blocked_affine_forward(h, p["bbox.W"], p["bbox.b"], 4)
        if cache:
            self._cache = (acts, pre)
        return logits, deltas

    def backward(self, dlogits: np.ndarray, ddeltas: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input features."""
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        acts, pre = self._cache
        p = self.store.params
        g = self.store.grads
        h = acts[-1]
        dh, dW, db = affine_backward(dlogits, h, p["cls.W"])
        g["cls.W"] += dW
        g["cls.b"] += db
        dh2, dW, db = affine_backward(ddeltas, h, p["bbox.W"])
        g["bbox.W"] += dW
        g["bbox.b"] += db
        dh = dh + dh2
        names = _layer_names(len(self.hidden))
        for i in reversed(range(len(names))):
            dz = relu_backward(dh, pre[i])
            dh, dW, db = affine_backward(dz, acts[i], p[f"{names[i]}.W"])
            g[f"{names[i]}.W"] += dW
            g[f"{names[i]}.b"] += db
        return dh

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.in_dim, self.class_set, self.hidden, store=self.store.copy())


def extend_model(model: DetectorModel, added: Sequence[int], seed: int = 0) -> DetectorModel:
    """Append freshly initialised head columns for ``added`` classes.

    Existing columns and the trunk are copied bit-exactly; the previous
    ``old + new`` classes become the old classes of the result.
    """
    added = tuple(int(c) for c in added)
    if not added:
        return model.copy()
    clash = set(added) & set(model.class_set.all)
    if clash or len(set(added)) != len(added):
        raise ValidationError(f"cannot extend with duplicate class ids {sorted(clash) or added}")
    class_set = ClassSet(old=model.class_set.all, new=added)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, value in model.store.params.items():
        store.add(name, value)
    fan_in = store["cls.W"].shape[0]
    k = len(added)
    new_cls = rng.normal(0.0, CLS_INIT_STD, size=(fan_in, k))
    new_bbox = rng.normal(0.0, BBOX_INIT_STD, size=(fan_in, 4 * k))
    store.add("cls.W", np.concatenate([store["cls.W"], new_cls], axis=1))
    store.add("cls.b", np.concatenate([store["cls.b"], np.zeros(k)]))
    store.add("bbox.W", np.concatenate([store["bbox.W"], new_bbox], axis=1))
    store.add("bbox.b", np.concatenate([store["bbox.b"], np.zeros(4 * k)]))
    return DetectorModel(model.in_dim, class_set, model.hidden, store=store)


class FrozenSnapshot:
    """Read-only copy of a detector used as the distillation teacher.

    Per-scene responses can be precomputed with :meth:`precompute`; cached
    entries are the exact arrays a fresh full-scene forward pass returns.
    """

    def __init__(self, model: DetectorModel):
        store = ParamStore()
        for name, value in model.store.params.items():
            arr = value.copy()
            arr.setflags(write=False)
            store.params[name] = arr
        self._model = DetectorModel(model.in_dim, model.class_set, model.hidden, store=store)
        self._cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def class_set(self) -> ClassSet:
        return self._model.class_set

    @property
    def in_dim(self) -> int:
        return self._model.in_dim

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self._model.store.params

    def forward(self, features: np.ndarray):
        return self._model.forward(features, cache=False)

    def responses(self, scene, use_cache: bool = True):
        """Raw logits and deltas of every proposal of ``scene``."""
        if use_cache and scene.id in self._cache:
            return self._cache[scene.id]
        out = self.forward(scene.features)
        if use_cache:
            for a in out:
                a.setflags(write=False)
            self._cache[scene.id] = out
        return out

    def precompute(self, scenes) -> None:
        for scene in scenes:
            self.responses(scene, use_cache=True)

    def clear_cache(self) -> None:
        self._cache.clear()

    def thaw(self) -> DetectorModel:
        """A trainable copy of the frozen parameters."""
        return self._model.copy()


def freeze(model: DetectorModel) -> FrozenSnapshot:
    return FrozenSnapshot(model)


@dataclass
class Detections:
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.scores)

    def __iter__(self) -> Iterator[Tuple[int, np.ndarray, float]]:
        for c, b, s in zip(self.classes, self.boxes, self.scores):
            yield int(c), b, float(s)

    @staticmethod
    def concat(parts) -> "Detections":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Detections()
        return Detections(np.concatenate([p.classes for p in parts]),
                          np.concatenate([p.boxes for p in parts]),
                          np.concatenate([p.scores for p in parts]))


def detections_from_outputs(class_set: ClassSet, proposals: np.ndarray, logits: np.ndarray,
                            deltas: np.ndarray, score_threshold: float = 0.5,
                            nms_iou: float = 0.3, classes: Optional[Sequence[int]] = None) -> Detections:
    probs = softmax(logits)
    parts = []
    for class_id in (class_set.all if classes is None else classes):
        j = class_set.column(class_id)
        sel = np.flatnonzero(probs[:, j] > score_threshold)
        if sel.size == 0:
            continue
        refined = box_ops.decode(proposals[sel], deltas[sel, 4 * (j - 1):4 * j])
        keep = box_ops.nms(refined, probs[sel, j], nms_iou)
        parts.append(Detections(np.full(keep.size, class_id, dtype=np.int64), refined[keep],
                                probs[sel[keep], j]))
    return Detections.concat(parts)


def predict_detections(model, scene, score_threshold: float = 0.5, nms_iou: float = 0.3,
                       classes: Optional[Sequence[int]] = None) -> Detections:
    """Detections of one scene: per-class score threshold, box refinement, per-class NMS."""
    logits, deltas = model.forward(scene.features) if isinstance(model, FrozenSnapshot) \
        else model.forward(scene.features, cache=False)
    return detections_from_outputs(model.class_set, scene.proposal_boxes, logits, deltas,
                                   score_threshold, nms_iou, classes)


def predict_many(model, scenes, score_threshold: float = 0.5, nms_iou: float = 0.3,
                 classes: Optional[Sequence[int]] = None):
    """Like :func:`predict_detections` over many scenes with a single forward pass."""
    if not scenes:
        return []
    feats = np.concatenate([s.features for s in scenes])
    if isinstance(model, FrozenSnapshot):
        logits, deltas = model.forward(feats)
    else:
        logits, deltas = model.forward(feats, cache=False)
    out = []
    start = 0
    for s in scenes:
        stop = start + len(s.features)
        out.append(detections_from_outputs(model.class_set, s.proposal_boxes, logits[start:stop],
                                           deltas[start:stop], score_threshold, nms_iou, classes))
        start = stop
    return out
