"""Deterministic synthetic detection world.

A scene is a handful of ground-truth boxes in the unit square plus a pool of
proposals. Each proposal carries a feature vector built as an IoU-weighted
mixture of class prototypes, a background prototype for the uncovered part,
an IoU-weighted code of where the object sits relative to the proposal,
Gaussian noise and the proposal's own coordinates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import boxes as box_ops
from .container import read_container, write_container
from .model import ValidationError

# scene-id namespaces so train/val/test never share a scene
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


@dataclass(frozen=True)
class WorldSpec:
    n_classes: int = 8
    feature_dim: int = 32
    prototype_scale: float = 1.0
    noise: float = 0.6
    n_groups: int = 4
    group_similarity: float = 0.8
    offset_scale: float = 1.0
    class_offsets: bool = True
    evidence_knee: float = 0.6
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 0.15
    max_size: float = 0.5
    n_proposals: int = 200
    jitter_levels: Tuple[float, ...] = (0.03, 0.06, 0.1, 0.15, 0.2, 0.3)
    jitters_per_level: int = 3
    proposal_nms: float = 0.7
    background_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "jitter_levels", tuple(float(x) for x in self.jitter_levels))
        if self.n_classes < 1 or self.feature_dim < 1:
            raise ValidationError("world needs at least one class and one feature dimension")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValidationError("invalid objects-per-scene range")
        if not 0 <= self.group_similarity < 1 or self.n_groups < 1:
            raise ValidationError("group_similarity must be in [0, 1) with at least one group")
        if not 0 <= self.evidence_knee <= 1:
            raise ValidationError("evidence_knee must lie in [0, 1]")
        if not 0 < self.min_size <= self.max_size < 1:
            raise ValidationError("invalid object size range")

    @property
    def in_dim(self) -> int:
        """Width of a proposal feature (prototype space plus 4 box coordinates)."""
        return self.feature_dim + 4

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(range(1, self.n_classes + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jitter_levels"] = list(self.jitter_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        if "jitter_levels" in d:
            d["jitter_levels"] = tuple(d["jitter_levels"])
        return cls(**d)


@dataclass
class World:
    """Prototype vectors derived from a :class:`WorldSpec`."""

    spec: WorldSpec
    prototypes: np.ndarray  # row 0 is background
    offset_basis: np.ndarray  # [K + 1, 4, d], one code per class (row 0 unused)
    background_shift: np.ndarray

    @classmethod
    def from_spec(cls, spec: WorldSpec) -> "World":
        rng = np.random.default_rng([spec.seed, 0xB0B])
        d = spec.feature_dim
        min_dist = 4 * spec.noise
        for _ in range(1000):
            protos = rng.normal(0.0, spec.prototype_scale, size=(spec.n_classes + 1, d))
            groups = rng.normal(0.0, spec.prototype_scale, size=(spec.n_groups, d))
            rho = spec.group_similarity
            member = (np.arange(spec.n_classes)) % spec.n_groups
            protos[1:] = np.sqrt(rho) * groups[member] + np.sqrt(1 - rho) * protos[1:]
            diff = protos[:, None, :] - protos[None, :, :]
            dist = np.sqrt((diff ** 2).sum(-1))
            dist[np.diag_indices_from(dist)] = np.inf
            if dist.min() >= min_dist:
                break
        else:
            raise ValidationError("could not draw prototypes separated by 4 noise scales")
        basis = rng.normal(0.0, spec.offset_scale, size=(spec.n_classes + 1, 4, d))
        if not spec.class_offsets:
            basis[:] = basis[1]
        shift = rng.normal(0.0, 1.0, size=d)
        shift *= spec.background_shift / max(np.linalg.norm(shift), 1e-12)
        return cls(spec, protos, basis, shift)


@dataclass
class Scene:
    id: int
    gt_classes: np.ndarray
    gt_boxes: np.ndarray
    proposal_boxes: np.ndarray
    features: np.ndarray
    proposal_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.proposal_ids is None:
            self.proposal_ids = np.arange(len(self.proposal_boxes), dtype=np.int64)

    @property
    def n_proposals(self) -> int:
        return len(self.proposal_boxes)

    def gt_of(self, classes: Sequence[int]):
        """Ground-truth boxes restricted to ``classes``."""
        m = np.isin(self.gt_classes, np.asarray(list(classes), dtype=np.int64))
        return self.gt_classes[m], self.gt_boxes[m]

    def equals(self, other: "Scene") -> bool:
        return (self.id == other.id
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("gt_classes", "gt_boxes", "proposal_boxes", "features", "proposal_ids")))


def _random_boxes(rng, spec: WorldSpec, n: int) -> np.ndarray:
    wh = rng.uniform(spec.min_size, spec.max_size, size=(n, 2))
    xy = rng.uniform(0.0, 1.0, size=(n, 2)) * (1 - wh)
    return np.concatenate([xy, xy + wh], axis=1)


def _jitter(rng, box: np.ndarray, scale: float, n: int) -> np.ndarray:
    d = rng.normal(0.0, scale, size=(n, 4))
    out = box_ops.decode(np.repeat(box[None], n, axis=0), d)
    return out


def featurize_proposals(world: World, proposals: np.ndarray, gt_classes: np.ndarray,
                        gt_boxes: np.ndarray, rng: Optional[np.random.Generator] = None,
                        shifted: bool = False) -> np.ndarray:
    """Feature rows for ``proposals`` given every object in the scene.

    ``sum_obj w * (mu_class + offset_code) + (1 - max w) * mu_bg + noise``
    followed by the 4 box coordinates, where ``w`` is the IoU with the
    object, saturated at 1 above ``evidence_knee`` when that is positive.
    Noise is skipped when ``rng`` is None.
    """
    proposals = box_ops.as_boxes(proposals)
    n = len(proposals)
    d = world.spec.feature_dim
    mu_bg = world.prototypes[0] + (world.background_shift if shifted else 0.0)
    if len(gt_boxes):
        w = box_ops.iou_matrix(proposals, gt_boxes)
        if world.spec.evidence_knee > 0:
            w = np.minimum(1.0, w / world.spec.evidence_knee)
        feat = w @ world.prototypes[np.asarray(gt_classes, dtype=np.int64)]
        for j in range(len(gt_boxes)):
            t = box_ops.encode(proposals, np.repeat(gt_boxes[j:j + 1], n, axis=0))
            feat += w[:, j:j + 1] * (t @ world.offset_basis[int(gt_classes[j])])
        max_w = w.max(axis=1)
    else:
        feat = np.zeros((n, d))
        max_w = np.zeros(n)
    feat += (1.0 - max_w)[:, None] * mu_bg
    if rng is not None and world.spec.noise > 0:
        feat += rng.normal(0.0, world.spec.noise, size=(n, d))
    return np.concatenate([feat, proposals], axis=1)


def featurize_proposal(world: World, proposal, gt_classes, gt_boxes, rng=None, shifted=False):
    return featurize_proposals(world, box_ops.as_boxes(proposal), np.asarray(gt_classes),
                               box_ops.as_boxes(gt_boxes) if len(gt_boxes) else np.zeros((0, 4)),
                               rng, shifted)[0]


def raw_proposals(spec: WorldSpec, gt_boxes: np.ndarray, rng):
    """Proposal pool before NMS: (boxes, objectness scores)."""
    jit = []
    for box in gt_boxes:
        for level in spec.jitter_levels:
            jit.append(_jitter(rng, box, level, spec.jitters_per_level))
    jit = np.concatenate(jit) if jit else np.zeros((0, 4))
    n_rand = 2 * spec.n_proposals
    rand = _random_boxes(rng, spec, n_rand)
    # random boxes may be smaller than objects
    shrink = rng.uniform(0.3, 1.0, size=(n_rand, 1))
    centers = 0.5 * (rand[:, :2] + rand[:, 2:])
    half = 0.5 * (rand[:, 2:] - rand[:, :2]) * shrink
    rand = np.concatenate([centers - half, centers + half], axis=1)
    pool = np.concatenate([jit, rand])
    if len(gt_boxes):
        obj = box_ops.iou_matrix(pool, gt_boxes).max(axis=1)
    else:
        obj = np.zeros(len(pool))
    scores = obj + rng.uniform(0.0, 0.05, size=len(pool))
    return pool, scores


def generate_scene(world: World, scene_id: int, shifted: bool = False) -> Scene:
    """Scene ``scene_id`` of the world; a pure function of (spec, id, shifted)."""
    spec = world.spec
    rng = np.random.default_rng([spec.seed, int(scene_id)])
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    gt_classes = rng.integers(1, spec.n_classes + 1, size=n_obj).astype(np.int64)
    gt_boxes = _random_boxes(rng, spec, n_obj)
    pool, scores = raw_proposals(spec, gt_boxes, rng)
    keep = box_ops.nms(pool, scores, spec.proposal_nms, max_keep=spec.n_proposals)
    proposals = pool[np.sort(keep)]
    features = featurize_proposals(world, proposals, gt_classes, gt_boxes, rng, shifted)
    return Scene(int(scene_id), gt_classes, gt_boxes, proposals, features)


@dataclass
class Split:
    spec: WorldSpec
    name: str
    eligible: Tuple[int, ...]
    scenes: List[Scene]
    shifted: bool = False

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def header(self) -> dict:
        return {"kind": "dataset", "world": self.spec.to_dict(), "split": self.name,
                "eligible": list(self.eligible), "n_scenes": len(self.scenes),
                "shifted": self.shifted}


def build_split(spec: WorldSpec, n_scenes: int, eligible: Sequence[int], split: str = "train",
                shifted: bool = False, world: Optional[World] = None,
                cache: Optional[dict] = None) -> Split:
    """The first ``n_scenes`` scenes of ``split`` holding at least one eligible object.

    Objects of other classes stay in the scenes (and in their features) but
    are to be ignored by labelling. ``cache`` maps ``(scene id, shifted)`` to
    already generated scenes and is filled as a side effect.
    """
    eligible = tuple(sorted(int(c) for c in eligible))
    if not eligible:
        raise ValidationError("eligible class list is empty")
    bad = [c for c in eligible if c not in spec.classes]
    if bad:
        raise ValidationError(f"classes {bad} do not exist in a {spec.n_classes}-class world")
    if split not in SPLIT_OFFSETS:
        raise ValidationError(f"unknown split {split!r}")
    world = world or World.from_spec(spec)
    scenes = []
    sid = SPLIT_OFFSETS[split]
    while len(scenes) < n_scenes:
        key = (sid, shifted)
        scene = cache.get(key) if cache is not None else None
        if scene is None:
            scene = generate_scene(world, sid, shifted)
            if cache is not None:
                cache[key] = scene
        if np.isin(scene.gt_classes, eligible).any():
            scenes.append(scene)
        sid += 1
    return Split(spec, split, eligible, scenes, shifted)


def save_split(split: Split, path):
    tensors = {}
    for s in split.scenes:
        tensors[f"{s.id}/gt_classes"] = s.gt_classes.astype(np.float64)
        tensors[f"{s.id}/gt_boxes"] = s.gt_boxes
        tensors[f"{s.id}/proposal_boxes"] = s.proposal_boxes
        tensors[f"{s.id}/features"] = s.features
    header = split.header()
    header["scene_ids"] = [s.id for s in split.scenes]
    return write_container(path, header, tensors)


def load_split(path) -> Split:
    header, tensors = read_container(path)
    if header.get("kind") != "dataset":
        raise ValidationError(f"{path} is not a dataset file")
    spec = WorldSpec.from_dict(header["world"])
    scenes = []
    for sid in header["scene_ids"]:
        scenes.append(Scene(int(sid), tensors[f"{sid}/gt_classes"].astype(np.int64),
                            tensors[f"{sid}/gt_boxes"], tensors[f"{sid}/proposal_boxes"],
                            tensors[f"{sid}/features"]))
    return Split(spec, header["split"], tuple(header["eligible"]), scenes, header["shifted"])


def regenerate_split(header: dict) -> Split:
    """Rebuild a split from a dataset header alone."""
    spec = WorldSpec.from_dict(header["world"])
    return build_split(spec, header["n_scenes"], header["eligible"], header["split"], header["shifted"])
