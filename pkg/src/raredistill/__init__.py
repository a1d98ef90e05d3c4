"""Few-shot classification via contrastive pretraining and self-distillation."""

from .baseline import TeacherModel, extract_features, fit_baseline
from .data import (
    AugmentConfig,
    Dataset,
    EpisodeTask,
    augment_twice,
    load_dataset,
    make_synthetic_dataset,
    sample_task,
    split_base_rare,
)
from .distill import (
    DistillConfig,
    StudentModel,
    adapt_labels,
    alpha_schedule,
    classification_loss,
    distill,
    hybrid_loss,
    make_pseudo_labels,
    regression_loss,
    student_predict,
)
from .encoder import Encoder, EncoderConfig, build_encoder, embed, momentum_update
from .estimators import (
    ContrastivePretrainer,
    DistilledStudentClassifier,
    FrozenEncoderClassifier,
)
from .evaluation import Report, TaskResult, accuracy, macro_f1, run_protocol
from .pretrain import KeyQueue, PretrainConfig, info_nce_loss, lr_schedule, pretrain

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "ContrastivePretrainer",
    "Dataset",
    "DistillConfig",
    "DistilledStudentClassifier",
    "Encoder",
    "EncoderConfig",
    "EpisodeTask",
    "FrozenEncoderClassifier",
    "KeyQueue",
    "PretrainConfig",
    "Report",
    "StudentModel",
    "TaskResult",
    "TeacherModel",
    "accuracy",
    "adapt_labels",
    "alpha_schedule",
    "augment_twice",
    "build_encoder",
    "classification_loss",
    "distill",
    "embed",
    "extract_features",
    "fit_baseline",
    "hybrid_loss",
    "info_nce_loss",
    "load_dataset",
    "lr_schedule",
    "macro_f1",
    "make_pseudo_labels",
    "make_synthetic_dataset",
    "momentum_update",
    "pretrain",
    "regression_loss",
    "run_protocol",
    "sample_task",
    "split_base_rare",
    "student_predict",
]
