"""ViT / DeiT soft-voting ensemble for multi-class histopathology images, at toy scale.

Everything runs on a small float64 autodiff core, so models train on a CPU
in minutes and every gradient can be checked against finite differences.
"""

from .data import (MAGNIFICATIONS, SUBCLASSES, DatasetManifest, SampleRecord, SplitPlan,
                   load_manifest, make_split, partition_by_magnification, undersample_balance)
from .deit import DistillationLossConfig, deit_inference_probs, distillation_loss
from .ensemble import EnsemblePrediction, ProbVector, ensemble_predict, soft_vote
from .errors import VitDeitError
from .estimators import DeiTClassifier, SoftVotingClassifier, UndersampleBalancer, ViTClassifier
from .metrics import confusion, evaluate, malignancy_audit, per_class_metrics, roc_auc
from .training import TrainConfig, adamw_step, fine_tune, train
from .vit import ModelWeights, TransformerConfig, forward, init_weights

__version__ = "0.1.0"

__all__ = [
    "MAGNIFICATIONS", "SUBCLASSES", "DatasetManifest", "SampleRecord", "SplitPlan", "load_manifest",
    "make_split", "partition_by_magnification", "undersample_balance", "DistillationLossConfig",
    "deit_inference_probs", "distillation_loss", "EnsemblePrediction", "ProbVector",
    "ensemble_predict", "soft_vote", "VitDeitError", "DeiTClassifier", "SoftVotingClassifier",
    "UndersampleBalancer", "ViTClassifier", "confusion", "evaluate", "malignancy_audit",
    "per_class_metrics", "roc_auc", "TrainConfig", "adamw_step", "fine_tune", "train",
    "ModelWeights", "TransformerConfig", "forward", "init_weights",
]
