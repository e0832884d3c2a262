"""Scoliosis severity grading from natural back images.

A dual-path convolutional network (shared weights over the image and its
horizontal flip), symmetric feature matching via single-head attention, and
ordinal regression heads for 4-level and 10-level severity grading, built on
a self-contained numpy autodiff core.  Ships with a deterministic synthetic
back-image corpus, a full metric battery, and Grad-CAM explanations.
"""

from .tensor import Tape, Tensor, backward
from .backbone import Backbone, BackboneConfig, dual_path
from .matching import SymmetricMatching, attention_scores, sfmm_forward
from .ordinal import (LossWeights, OrdinalHead, OrdinalPrediction,
                      OrdinalTarget, decode_rank, encode_rank, joint_loss,
                      level_loss, level_scores)
from .network import NetworkConfig, SeverityNet
from .data import (AugmentPolicy, FINE_SCHEME, GENERAL_SCHEME, Sample,
                   SynthConfig, augment, build_corpus, crop_bbox, fine_level,
                   general_level, generate_corpus, load_corpus, synth_back)
from .metrics import (ConfusionMatrix, MetricsReport, accuracy, compute_report,
                      confusion, kappa, mae, micro_average, one_vs_rest,
                      roc_auc)
from .train import (AdamW, Schedule, TrainConfig, evaluate, fit, five_fold,
                    fold_split, holdout_split, load_checkpoint, lr_at,
                    predict, save_checkpoint)
from .explain import Heatmap, gradcam, overlay

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward",
    "Backbone", "BackboneConfig", "dual_path",
    "SymmetricMatching", "attention_scores", "sfmm_forward",
    "LossWeights", "OrdinalHead", "OrdinalPrediction", "OrdinalTarget",
    "decode_rank", "encode_rank", "joint_loss", "level_loss", "level_scores",
    "NetworkConfig", "SeverityNet",
    "AugmentPolicy", "FINE_SCHEME", "GENERAL_SCHEME", "Sample", "SynthConfig",
    "augment", "build_corpus", "crop_bbox", "fine_level", "general_level",
    "generate_corpus", "load_corpus", "synth_back",
    "ConfusionMatrix", "MetricsReport", "accuracy", "compute_report",
    "confusion", "kappa", "mae", "micro_average", "one_vs_rest", "roc_auc",
    "AdamW", "Schedule", "TrainConfig", "evaluate", "fit", "five_fold",
    "fold_split", "holdout_split", "load_checkpoint", "lr_at", "predict",
    "save_checkpoint",
    "Heatmap", "gradcam", "overlay",
]
