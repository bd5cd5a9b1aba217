"""Experiment protocols: base training, class extension with every baseline,
sequential extension, multiple networks, lambda sweeps and CSV/SVG reports."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import save_checkpoint
from .data import Scene, Split, World, WorldSpec, build_split
from .evaluation import EvalReport, evaluate
from .kernel import OptimizerConfig
from .losses import FisherDiagonal, estimate_fisher
from .model import ClassSet, DetectorModel, Detections, ValidationError, extend_model, freeze, predict_many
from .sampling import compose_training_batch
from .training import (
    BatchSettings,
    Distillation,
    DivergenceError,
    Schedule,
    freeze_masks,
    label_scenes,
    train_detector,
)

log = logging.getLogger(__name__)

METHODS = ("distill_l2", "distill_ce", "no_distill", "frozen_trunk", "frozen_all",
           "frozen_trunk_distill", "no_bbox_distill", "unbiased_distill", "ewc",
           "multi_network", "joint_baseline")
DISTILL_METHODS = ("distill_l2", "distill_ce", "frozen_trunk_distill", "no_bbox_distill",
                   "unbiased_distill")
SEQUENTIAL_METHODS = DISTILL_METHODS + ("no_distill", "frozen_trunk", "frozen_all")


class ConfigError(ValidationError):
    """Malformed configuration file or value."""


# ----------------------------------------------------------------------------- config

@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    seed: int = 1
    old_classes: Tuple[int, ...] = (1, 2, 3, 4)
    new_classes: Tuple[int, ...] = (5, 6, 7, 8)
    method: str = "distill_l2"
    lam: float = 1.0
    lambdas: Tuple[float, ...] = (0.1, 1.0, 10.0)
    hidden: Tuple[int, ...] = (40, 40)
    n_train: int = 600
    n_val: int = 100
    n_test: int = 200
    shifted_phase2: bool = False
    phase1_steps: int = 4000
    phase1_decay_step: int = 3000
    phase2_steps_per_class: int = 1000
    images_per_batch: int = 2
    rois_per_image: int = 64
    fg_per_image: int = 16
    bg_lo: float = 0.1
    n_pool: int = 128
    n_pick: int = 64
    include_background: bool = True
    teacher_cache: bool = True
    score_threshold: float = 0.5
    nms_iou: float = 0.3
    ap_mode: str = "11point"
    eval_every: int = 250
    ewc_strength: Optional[float] = None
    ewc_grid: Tuple[float, ...] = (1.0, 10.0, 100.0, 1e3, 1e4, 1e5)
    fisher_batches: int = 200
    phase1_lr: float = 0.01
    phase1_decayed_lr: float = 0.001
    phase2_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.00005

    def __post_init__(self):
        for name in ("old_classes", "new_classes", "hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("lambdas", "ewc_grid"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        ClassSet(self.old_classes, self.new_classes)  # disjointness and positivity
        missing = [c for c in self.old_classes + self.new_classes if c not in self.world.classes]
        if missing:
            raise ConfigError(f"classes {missing} are not in the {self.world.n_classes}-class world")
        if not self.old_classes:
            raise ConfigError("old_classes must not be empty")
        if self.lam < 0 or any(v < 0 for v in self.lambdas):
            raise ConfigError("lambda must be non-negative")
        if self.ap_mode not in ("11point", "all"):
            raise ConfigError(f"ap_mode must be 11point or all, got {self.ap_mode!r}")
        if min(self.n_train, self.n_val, self.n_test, self.phase1_steps) < 1:
            raise ConfigError("split sizes and step counts must be positive")
        # range checks live in OptimizerConfig
        try:
            OptimizerConfig(self.phase1_lr, self.momentum, self.weight_decay)
            OptimizerConfig(self.phase2_lr, self.momentum, self.weight_decay)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def world_spec(self) -> WorldSpec:
        """The world of this run; its seed is the experiment seed."""
        return dataclasses.replace(self.world, seed=self.seed)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.phase1_lr, self.momentum, self.weight_decay)

    @property
    def batch(self) -> BatchSettings:
        return BatchSettings(self.images_per_batch, self.rois_per_image, self.fg_per_image, self.bg_lo)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "world"}
        d["world"] = self.world_spec.to_dict()
        return json.loads(json.dumps(d))

    @property
    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    # ---- INI round trip

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, (owner, keys) in _sections().items():
            src = self.world if owner == "world" else self
            cp[section] = {ini: _fmt(getattr(src, attr)) for ini, attr in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, **overrides) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse configuration: {exc}") from exc
        sections = _sections()
        world_kw, exp_kw = {}, {}
        for section in cp.sections():
            if section not in sections:
                raise ConfigError(f"unknown section [{section}]")
            owner, keys = sections[section]
            for key, raw in cp[section].items():
                if key not in keys:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                attr = keys[key]
                template = WorldSpec if owner == "world" else cls
                target = world_kw if owner == "world" else exp_kw
                target[attr] = _parse(raw, _default_of(template, attr), f"{section}.{key}")
        try:
            world = WorldSpec(**world_kw)
            exp_kw.update(overrides)
            return cls(world=world, **exp_kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_ini(text, **overrides)


_OPTIMIZER_KEYS = ("phase1_lr", "phase1_decayed_lr", "phase2_lr", "momentum", "weight_decay")


def _sections():
    world = {f.name: f.name for f in dataclasses.fields(WorldSpec) if f.name != "seed"}
    exp = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("world",) + _OPTIMIZER_KEYS:
            continue
        exp["lambda" if f.name == "lam" else f.name] = f.name
    return {"world": ("world", world), "experiment": ("experiment", exp),
            "optimizer": ("experiment", {k: k for k in _OPTIMIZER_KEYS})}


def _default_of(cls, attr):
    f = next(f for f in dataclasses.fields(cls) if f.name == attr)
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(float(v)) if kind is int else kind(v)
                         for v in raw.split(",") if v.strip())
        if default is None:
            return None if raw.lower() == "auto" else float(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {where}") from exc


def derive_seed(seed: int, *tags) -> int:
    """Stable child seed of ``seed`` for a named purpose."""
    words = [int(seed)] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ----------------------------------------------------------------------------- data

class Lab:
    """Splits of one synthetic world, generated lazily and shared across runs."""

    _instances: Dict[tuple, "Lab"] = {}

    def __init__(self, spec: WorldSpec, n_train: int, n_val: int, n_test: int):
        self.spec = spec
        self.world = World.from_spec(spec)
        self.sizes = {"train": n_train, "val": n_val, "test": n_test}
        self._scenes: dict = {}
        self._splits: Dict[tuple, Split] = {}

    @classmethod
    def for_config(cls, cfg: ExperimentConfig) -> "Lab":
        key = (cfg.world_spec, cfg.n_train, cfg.n_val, cfg.n_test)
        if key not in cls._instances:
            cls._instances[key] = cls(*key)
        return cls._instances[key]

    @classmethod
    def clear(cls):
        cls._instances.clear()

    def split(self, eligible: Sequence[int], name: str = "train", shifted: bool = False) -> Split:
        key = (tuple(sorted(eligible)), name, shifted)
        if key not in self._splits:
            self._splits[key] = build_split(self.spec, self.sizes[name], eligible, name, shifted,
                                            world=self.world, cache=self._scenes)
        return self._splits[key]

    def union(self, *splits: Split) -> List[Scene]:
        """Scenes of several splits, each once, in id order."""
        seen = {}
        for split in splits:
            for scene in split:
                seen.setdefault((scene.id, split.shifted), scene)
        return [seen[k] for k in sorted(seen)]

    def val(self) -> Split:
        return self.split(self.spec.classes, "val")

    def test(self) -> Split:
        return self.split(self.spec.classes, "test")


# ----------------------------------------------------------------------------- records

@dataclass
class RunRecord:
    method: str
    config_hash: str
    report: EvalReport
    lam: Optional[float] = None
    label: str = ""
    evals: Dict[int, EvalReport] = field(default_factory=dict)
    losses: List[float] = field(default_factory=list)
    stages: List[EvalReport] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if not self.label:
            self.label = self.method

    @property
    def curve(self):
        """(step, old, new, all) mAP@0.5 on the validation split."""
        return [(s, r.old, r.new, r.map50) for s, r in sorted(self.evals.items())]


@dataclass
class PhaseResult:
    model: object
    record: RunRecord
    fisher: Optional[FisherDiagonal] = None


def _evaluate(cfg, model, scenes, class_set, coco=True) -> EvalReport:
    return evaluate(model, scenes, class_set.all, class_set, cfg.score_threshold, cfg.nms_iou,
                    cfg.ap_mode, coco=coco)


def _tracker(cfg, lab, class_set, evals):
    if not cfg.eval_every:
        return None

    def callback(step, model):
        evals[step] = _evaluate(cfg, model, lab.val().scenes, class_set, coco=False)
    return callback


def _save(cfg, out_dir, name, model, fisher=None, **meta):
    """Checkpoint with the resolved configuration embedded in its header."""
    if out_dir is None:
        return None
    path = Path(out_dir) / f"{name}.ildet"
    save_checkpoint(path, model, fisher, {"config_hash": cfg.hash, "config": cfg.to_ini(), **meta})
    return str(path)


# ----------------------------------------------------------------------------- phase 1

def fisher_batches(cfg: ExperimentConfig, scenes, eligible, class_set: ClassSet):
    labels = label_scenes(scenes, eligible)
    rng = np.random.default_rng(derive_seed(cfg.seed, "fisher"))
    out = []
    for _ in range(cfg.fisher_batches):
        idx = rng.choice(len(scenes), size=min(cfg.images_per_batch, len(scenes)), replace=False)
        out.append(compose_training_batch([scenes[i] for i in idx], [labels[i] for i in idx],
                                          class_set, rng, cfg.rois_per_image, cfg.fg_per_image,
                                          cfg.bg_lo))
    return out


def run_phase1(cfg: ExperimentConfig, classes: Optional[Sequence[int]] = None, with_fisher: bool = False,
               out_dir=None, lab: Optional[Lab] = None, label: str = "phase1",
               scenes=None) -> PhaseResult:
    """Train a detector from scratch on the scenes holding any of ``classes``
    (default: the old classes), with annotations of those classes only.

    ``scenes`` overrides the training scenes.
    """
    lab = lab or Lab.for_config(cfg)
    classes = tuple(classes or cfg.old_classes)
    start = time.perf_counter()
    class_set = ClassSet(classes)
    scenes = lab.split(classes).scenes if scenes is None else list(scenes)
    model = DetectorModel(cfg.world.in_dim, class_set, cfg.hidden, seed=derive_seed(cfg.seed, "init", classes))
    evals: Dict[int, EvalReport] = {}
    sched = Schedule(cfg.phase1_steps, cfg.phase1_lr, cfg.phase1_decay_step, cfg.phase1_decayed_lr)
    trace = train_detector(model, scenes, classes, sched, cfg.optimizer, derive_seed(cfg.seed, "train", classes),
                           cfg.batch, callback=_tracker(cfg, lab, class_set, evals),
                           callback_every=cfg.eval_every)
    fisher = None
    if with_fisher:
        fisher = estimate_fisher(model, fisher_batches(cfg, scenes, classes, class_set))
    report = _evaluate(cfg, model, lab.test().scenes, class_set)
    record = RunRecord(label, cfg.hash, report, evals=evals, losses=trace.losses,
                       wall_clock=time.perf_counter() - start)
    record.checkpoint_path = _save(cfg, out_dir, label, model, fisher)
    return PhaseResult(model, record, fisher)


# ----------------------------------------------------------------------------- phase 2

def _extend_once(cfg, lab, base: DetectorModel, added, method, lam, stage, fisher=None,
                 ewc_strength=None, evals=None):
    """One extension step of ``base`` by ``added`` with ``method``; returns the trained model and log."""
    if set(added) & set(base.class_set.all):
        raise ValidationError(f"classes {sorted(set(added) & set(base.class_set.all))} are already learnt")
    teacher = freeze(base)
    model = extend_model(base, added, seed=derive_seed(cfg.seed, "extend", stage))
    scenes = lab.split(added, "train", cfg.shifted_phase2).scenes
    distill = None
    if method in DISTILL_METHODS:
        distill = Distillation(teacher, lam, "ce" if method == "distill_ce" else "l2",
                               include_bbox=method != "no_bbox_distill",
                               biased=method != "unbiased_distill", n_pool=cfg.n_pool,
                               n_pick=cfg.n_pick, include_background=cfg.include_background,
                               use_cache=cfg.teacher_cache)
        if cfg.teacher_cache:
            teacher.precompute(scenes)
    masks = None
    if method in ("frozen_trunk", "frozen_trunk_distill"):
        masks = freeze_masks(model, trunk=True)
    elif method == "frozen_all":
        masks = freeze_masks(model, trunk=True, old_heads=True)
    ewc = None
    if method == "ewc":
        if fisher is None:
            raise ValidationError("the ewc method needs a Fisher estimate from phase 1")
        ewc = (fisher, ewc_strength)
    sched = Schedule(cfg.phase2_steps_per_class * len(added), cfg.phase2_lr)
    opt = OptimizerConfig(cfg.phase2_lr, cfg.momentum, cfg.weight_decay)
    callback = _tracker(cfg, lab, model.class_set, evals) if evals is not None else None
    trace = train_detector(model, scenes, added, sched, opt, derive_seed(cfg.seed, "train", "extend", stage),
                           cfg.batch, distill=distill, masks=masks, ewc=ewc, callback=callback,
                           callback_every=cfg.eval_every)
    return model, trace


def select_ewc_strength(cfg: ExperimentConfig, base: DetectorModel, fisher: FisherDiagonal,
                        lab: Optional[Lab] = None):
    """Pick the grid strength with the best all-class validation mAP.

    Returns ``(strength, model, table)``; diverging candidates are skipped.
    """
    lab = lab or Lab.for_config(cfg)
    best = None
    table = []
    for strength in cfg.ewc_grid:
        try:
            model, _ = _extend_once(cfg, lab, base, cfg.new_classes, "ewc", 0.0, 0, fisher, strength)
        except DivergenceError as exc:
            log.warning("EWC strength %g diverged: %s", strength, exc)
            table.append((strength, math.nan))
            continue
        score = _evaluate(cfg, model, lab.val().scenes, model.class_set, coco=False).map50
        table.append((strength, score))
        log.info("EWC strength %g: validation mAP %.4f", strength, score)
        if best is None or score > best[1]:
            best = (strength, score, model)
    if best is None:
        raise DivergenceError("every EWC strength in the grid diverged")
    return best[0], best[2], table


def run_extension(cfg: ExperimentConfig, base: Optional[DetectorModel] = None,
                  fisher: Optional[FisherDiagonal] = None, method: Optional[str] = None,
                  lam: Optional[float] = None, out_dir=None, lab: Optional[Lab] = None,
                  label: Optional[str] = None) -> PhaseResult:
    """Add ``cfg.new_classes`` to ``base`` in one step with the given method."""
    lab = lab or Lab.for_config(cfg)
    method = method or cfg.method
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}")
    lam = cfg.lam if lam is None else float(lam)
    label = label or method
    if method == "joint_baseline":
        # the scenes both incremental phases train on, with every label
        scenes = lab.union(lab.split(cfg.old_classes),
                           lab.split(cfg.new_classes, "train", cfg.shifted_phase2))
        res = run_phase1(cfg, cfg.old_classes + cfg.new_classes, out_dir=out_dir, lab=lab,
                         label=label, scenes=scenes)
        res.record.method = method
        res.record.report.class_set = ClassSet(cfg.old_classes, cfg.new_classes)
        return res
    if base is None:
        phase1 = run_phase1(cfg, with_fisher=method == "ewc" and fisher is None, lab=lab)
        base, fisher = phase1.model, fisher or phase1.fisher
    if tuple(base.class_set.all) != tuple(cfg.old_classes):
        raise ValidationError(f"checkpoint classes {base.class_set.all} differ from old_classes "
                              f"{cfg.old_classes}")
    if method == "multi_network":
        return run_multi_network(cfg, base, out_dir=out_dir, lab=lab, label=label)
    start = time.perf_counter()
    evals: Dict[int, EvalReport] = {}
    extra = {}
    if method == "ewc":
        if fisher is None:
            raise ValidationError("the ewc method needs a Fisher estimate from phase 1")
        strength = cfg.ewc_strength
        if strength is None:
            strength, model, table = select_ewc_strength(cfg, base, fisher, lab)
            extra["ewc_grid"] = table
        else:
            model, _ = _extend_once(cfg, lab, base, cfg.new_classes, method, lam, 0, fisher, strength)
        extra["ewc_strength"] = strength
        losses = []
    else:
        model, trace = _extend_once(cfg, lab, base, cfg.new_classes, method, lam, 0, evals=evals)
        losses = trace.losses
    report = _evaluate(cfg, model, lab.test().scenes, model.class_set)
    record = RunRecord(method, cfg.hash, report, lam if method in DISTILL_METHODS else None, label,
                       evals, losses, extra=extra, wall_clock=time.perf_counter() - start)
    record.checkpoint_path = _save(cfg, out_dir, label, model, method=method)
    return PhaseResult(model, record)


def run_sequential(cfg: ExperimentConfig, base: DetectorModel, method: Optional[str] = None,
                   lam: Optional[float] = None, out_dir=None, lab: Optional[Lab] = None,
                   label: Optional[str] = None) -> PhaseResult:
    """Add ``cfg.new_classes`` one at a time; each step distils from the previous model."""
    lab = lab or Lab.for_config(cfg)
    method = method or cfg.method
    if method not in SEQUENTIAL_METHODS:
        raise ValidationError(f"method {method!r} has no sequential protocol")
    if tuple(base.class_set.all) != tuple(cfg.old_classes):
        raise ValidationError(f"checkpoint classes {base.class_set.all} differ from old_classes "
                              f"{cfg.old_classes}")
    lam = cfg.lam if lam is None else float(lam)
    start = time.perf_counter()
    model = base
    stages, losses = [], []
    evals: Dict[int, EvalReport] = {}
    offset = 0
    for stage, c in enumerate(cfg.new_classes):
        step_evals: Dict[int, EvalReport] = {}
        model, trace = _extend_once(cfg, lab, model, (c,), method, lam, stage, evals=step_evals)
        evals.update({offset + s: r for s, r in step_evals.items()})
        offset += len(trace.losses)
        losses.extend(trace.losses)
        stages.append(_evaluate(cfg, model, lab.test().scenes, model.class_set))
    final = ClassSet(cfg.old_classes, cfg.new_classes)
    report = _evaluate(cfg, model, lab.test().scenes, final)
    label = label or f"sequential_{method}"
    record = RunRecord(method, cfg.hash, report, lam if method in DISTILL_METHODS else None, label,
                       evals, losses, stages, wall_clock=time.perf_counter() - start)
    record.checkpoint_path = _save(cfg, out_dir, label, model, method=method)
    return PhaseResult(model, record)


class CombinedDetector:
    """Several detectors with disjoint classes acting as one.

    Each member thresholds and suppresses its own classes; because the
    class sets are disjoint, the union equals per-class NMS over all members.
    """

    def __init__(self, members: Sequence[DetectorModel], class_set: ClassSet):
        self.members = list(members)
        self.class_set = class_set

    def detect(self, scenes, score_threshold: float = 0.5, nms_iou: float = 0.3):
        per_member = [predict_many(m, scenes, score_threshold, nms_iou) for m in self.members]
        return [Detections.concat(parts) for parts in zip(*per_member)]


def run_multi_network(cfg: ExperimentConfig, base: DetectorModel, out_dir=None,
                      lab: Optional[Lab] = None, label: str = "multi_network") -> PhaseResult:
    """One independent single-class detector per new class, combined with ``base``."""
    lab = lab or Lab.for_config(cfg)
    start = time.perf_counter()
    members = [base]
    steps = cfg.phase2_steps_per_class
    for c in cfg.new_classes:
        cs = ClassSet((c,))
        m = DetectorModel(cfg.world.in_dim, cs, cfg.hidden, seed=derive_seed(cfg.seed, "init", "multi", c))
        sched = Schedule(steps, cfg.phase1_lr, int(steps * cfg.phase1_decay_step / cfg.phase1_steps),
                         cfg.phase1_decayed_lr)
        train_detector(m, lab.split((c,)).scenes, (c,), sched, cfg.optimizer,
                       derive_seed(cfg.seed, "train", "multi", c), cfg.batch)
        members.append(m)
        if out_dir is not None:
            _save(cfg, out_dir, f"{label}_class{c}", m, method="multi_network")
    combined = CombinedDetector(members, ClassSet(cfg.old_classes, cfg.new_classes))
    report = evaluate(combined, lab.test().scenes, None, combined.class_set, cfg.score_threshold,
                      cfg.nms_iou, cfg.ap_mode)
    record = RunRecord("multi_network", cfg.hash, report, label=label,
                       wall_clock=time.perf_counter() - start)
    return PhaseResult(combined, record)


def sweep_lambda(cfg: ExperimentConfig, base: DetectorModel, lambdas: Optional[Sequence[float]] = None,
                 out_dir=None, lab: Optional[Lab] = None) -> List[RunRecord]:
    """One distill_l2 extension per lambda."""
    lambdas = tuple(cfg.lambdas if lambdas is None else lambdas)
    if not lambdas:
        raise ValidationError("lambda list is empty")
    records = []
    for lam in lambdas:
        res = run_extension(cfg, base, method="distill_l2", lam=lam, lab=lab,
                            label=f"distill_l2[lambda={lam:g}]")
        records.append(res.record)
    if out_dir is not None:
        write_lambda_sweep(records, out_dir)
    return records


# ----------------------------------------------------------------------------- the full matrix

@dataclass
class Suite:
    """Every run of the comparison matrix for one configuration."""

    config: ExperimentConfig
    records: Dict[str, RunRecord]
    models: Dict[str, object]
    sweep: List[RunRecord]

    def __getitem__(self, key) -> RunRecord:
        return self.records[key]


def run_suite(cfg: ExperimentConfig, out_dir=None, methods: Sequence[str] = METHODS,
              sequential: Sequence[str] = ("distill_l2", "unbiased_distill", "no_distill"),
              lambdas: Optional[Sequence[float]] = None) -> Suite:
    """Phase 1, every at-once method, the lambda sweep and sequential runs."""
    lab = Lab.for_config(cfg)
    base = run_phase1(cfg, with_fisher="ewc" in methods, lab=lab)
    records = {"phase1": base.record}
    models = {"phase1": base.model}
    for method in methods:
        res = run_extension(cfg, base.model, base.fisher, method, lab=lab)
        records[method] = res.record
        models[method] = res.model
        log.info("%s: old %.4f new %.4f all %.4f", method, res.record.report.old,
                 res.record.report.new, res.record.report.map50)
    sweep = []
    for lam in (cfg.lambdas if lambdas is None else lambdas):
        if lam == cfg.lam and "distill_l2" in records:
            rec = dataclasses.replace(records["distill_l2"], label=f"distill_l2[lambda={lam:g}]")
        else:
            rec = run_extension(cfg, base.model, method="distill_l2", lam=lam, lab=lab,
                                label=f"distill_l2[lambda={lam:g}]").record
        sweep.append(rec)
    for method in sequential:
        res = run_sequential(cfg, base.model, method, lab=lab)
        records[res.record.label] = res.record
        models[res.record.label] = res.model
    suite = Suite(cfg, records, models, sweep)
    if out_dir is not None:
        emit_report(list(records.values()), out_dir, sweep)
    return suite


# ----------------------------------------------------------------------------- reports

def _num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path


def write_ap_matrix(records: Sequence[RunRecord], path) -> Path:
    rows = []
    for rec in records:
        for row in rec.report.rows(rec.label):
            rows.append([row["method"], row["class"], _num(row["AP50"])])
    return _write_csv(Path(path), ["method", "class", "AP50"], rows)


def write_summary(records: Sequence[RunRecord], path) -> Path:
    rows = []
    for rec in records:
        r = rec.report
        rows.append([rec.label, rec.method, _num(rec.lam), _num(r.old), _num(r.new), _num(r.map50),
                     _num(r.map_coco), rec.config_hash])
    return _write_csv(Path(path), ["method", "base_method", "lambda", "old", "new", "all",
                                   "map_coco", "config_hash"], rows)


def write_curves(records: Sequence[RunRecord], path) -> Path:
    rows = [[rec.label, step, _num(o), _num(n), _num(a)]
            for rec in records for step, o, n, a in rec.curve]
    return _write_csv(Path(path), ["method", "step", "old", "new", "all"], rows)


def write_lambda_sweep(records: Sequence[RunRecord], out_dir) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    rows = [[_num(r.lam), _num(r.report.old), _num(r.report.new), _num(r.report.map50)]
            for r in records]
    csv_path = _write_csv(out_dir / "lambda_sweep.csv", ["lambda", "old", "new", "all"], rows)
    return csv_path, plot_lambda_sweep(records, out_dir / "lambda_sweep.svg")


def plot_lambda_sweep(records: Sequence[RunRecord], path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    lams = [r.lam for r in records]
    with matplotlib.rc_context({"svg.hashsalt": "ildet", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for attr, style in (("old", "o-"), ("new", "s-"), ("all", "^--")):
            values = [getattr(r.report, attr) if attr != "all" else r.report.map50 for r in records]
            ax.plot(lams, values, style, label=f"{attr} classes")
        if all(v > 0 for v in lams):
            ax.set_xscale("log")
        ax.set_xlabel("lambda")
        ax.set_ylabel("mAP@0.5")
        ax.set_ylim(0.0, 1.0)
        ax.legend(loc="lower left")
        fig.tight_layout()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise OSError(f"cannot write plot {path}: {exc}") from exc
        finally:
            plt.close(fig)
    return path


def emit_report(records: Sequence[RunRecord], out_dir, sweep: Sequence[RunRecord] = ()) -> List[Path]:
    """Write ap_matrix.csv, summary.csv, curves.csv and, given a sweep, the lambda table and plot."""
    records = list(records)
    if not records:
        raise ValidationError("no run records to report")
    out_dir = Path(out_dir)
    paths = [write_ap_matrix(records, out_dir / "ap_matrix.csv"),
             write_summary(records, out_dir / "summary.csv"),
             write_curves(records, out_dir / "curves.csv")]
    if sweep:
        paths.extend(write_lambda_sweep(sweep, out_dir))
    return paths
