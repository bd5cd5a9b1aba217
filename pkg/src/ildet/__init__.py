"""Incremental learning of object detectors without catastrophic forgetting,
on a deterministic synthetic detection world."""

from .boxes import decode, encode, iou, iou_matrix, nms
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Scene, Split, World, WorldSpec, build_split, generate_scene
from .evaluation import EvalReport, average_precision, evaluate
from .experiments import (
    ExperimentConfig,
    RunRecord,
    emit_report,
    run_extension,
    run_multi_network,
    run_phase1,
    run_sequential,
    run_suite,
    sweep_lambda,
)
from .kernel import OptimizerConfig, ParamStore, grad_check, sgd_nesterov_step, softmax
from .losses import (
    DistillationRecord,
    FisherDiagonal,
    crossentropy_distillation_loss,
    distillation_loss,
    estimate_fisher,
    ewc_penalty,
    frcnn_loss,
    joint_loss,
)
from .model import ClassSet, DetectorModel, FrozenSnapshot, ValidationError, extend_model, freeze
from .sampling import compose_training_batch, label_proposals, select_distillation_rois, select_unbiased_rois
from .training import DivergenceError, train_detector

__version__ = "0.1.0"
