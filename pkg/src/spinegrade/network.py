"""Full model assembly: shared backbone feeding severity-grading branches.

Variants (for ablations):
  * ``full``           dual path -> per-branch matching -> ordinal heads for
                       both the 4-level and the 10-level task
  * ``baseline``       single path -> pooled multi-class softmax (4 levels)
  * ``baseline_sfmm``  dual path -> matching -> multi-class softmax
  * ``baseline_orh``   single path -> ordinal head (4 levels)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backbone import Backbone, BackboneConfig, dual_path
from .layers import Linear, Module, global_avg_pool
from .matching import SymmetricMatching
from .ordinal import (LossWeights, OrdinalHead, OrdinalPrediction, joint_loss,
                      level_loss, level_scores)
from .tensor import (Tape, Tensor, clip, column, log, mul, neg, reduce_mean,
                     softmax)

VARIANTS = ("full", "baseline", "baseline_sfmm", "baseline_orh")

GENERAL_LEVELS = 4
FINE_LEVELS = 10


@dataclass
class NetworkConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: str = "full"
    general_levels: int = GENERAL_LEVELS
    fine_levels: int = FINE_LEVELS
    use_projections: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; one of {VARIANTS}")


@dataclass
class MulticlassPrediction:
    levels: int
    yhat: np.ndarray      # (N, K) softmax probabilities
    rhat: np.ndarray      # (N,) argmax + 1
    probs: Tensor
    logits: Tensor


@dataclass
class NetworkOutput:
    general: OrdinalPrediction | MulticlassPrediction
    fine: Optional[OrdinalPrediction]
    activations: dict[str, Tensor]


@dataclass
class LossTriple:
    general: Tensor
    fine: Optional[Tensor]
    total: Tensor


class MulticlassHead(Module):
    """Pooled K-way softmax classifier (ablation baseline head)."""

    def __init__(self, channels: int, levels: int,
                 rng: np.random.Generator | None = None):
        self.levels = levels
        self.fc = Linear(channels, levels, rng=rng)

    def forward(self, feat: Tensor) -> MulticlassPrediction:
        pooled = global_avg_pool(feat) if feat.ndim in (3, 4) else feat
        logits = self.fc.forward(pooled)
        probs = softmax(logits, axis=-1)
        yhat = probs.data.copy()
        return MulticlassPrediction(self.levels, yhat,
                                    yhat.argmax(axis=-1) + 1, probs, logits)


def multiclass_loss(pred: MulticlassPrediction, ranks) -> Tensor:
    """Mean cross-entropy against integer ranks in [1, K]."""
    idx = np.asarray(ranks, dtype=np.int64) - 1
    onehot = np.zeros_like(pred.yhat)
    onehot[np.arange(len(idx)), idx] = 1.0
    p = clip(pred.probs, 1e-12, 1.0)
    picked = mul(Tensor(onehot), log(p))
    return neg(reduce_mean(picked.sum(axis=-1)))


class SeverityNet(Module):
    """Backbone plus grading branch(es), per the configured variant."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng)
        channels = cfg.backbone.out_channels
        v = cfg.variant
        self.match_general = (
            SymmetricMatching(channels, cfg.use_projections, rng)
            if v in ("full", "baseline_sfmm") else None)
        if v == "full":
            self.head_general = OrdinalHead(channels, cfg.general_levels, rng)
            self.match_fine = SymmetricMatching(channels, cfg.use_projections, rng)
            self.head_fine = OrdinalHead(channels, cfg.fine_levels, rng)
        elif v == "baseline_orh":
            self.head_general = OrdinalHead(channels, cfg.general_levels, rng)
            self.match_fine = None
            self.head_fine = None
        else:  # baseline, baseline_sfmm
            self.head_general = MulticlassHead(channels, cfg.general_levels, rng)
            self.match_fine = None
            self.head_fine = None

    @property
    def dual(self) -> bool:
        return self.match_general is not None

    def forward(self, images: np.ndarray | Tensor, tape: Tape | None = None,
                rng: np.random.Generator | None = None) -> NetworkOutput:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = Tensor(x.data[None])
        if tape is not None:
            x.tape = tape
        acts: dict[str, Tensor] = {}
        if self.dual:
            f, ff = dual_path(x, self.backbone, rng)
            acts["backbone"] = f
            acts["backbone_flipped"] = ff
            feat_general = self.match_general.forward(f, ff)
            acts["matching_general"] = feat_general
        else:
            f = self.backbone.forward(x, rng)
            acts["backbone"] = f
            feat_general = f
        general = self.head_general.forward(feat_general)
        fine = None
        if self.match_fine is not None:
            feat_fine = self.match_fine.forward(f, ff)
            acts["matching_fine"] = feat_fine
            fine = self.head_fine.forward(feat_fine)
        return NetworkOutput(general, fine, acts)

    def compute_loss(self, out: NetworkOutput, general_ranks, fine_ranks,
                     weights: LossWeights) -> LossTriple:
        if isinstance(out.general, OrdinalPrediction):
            l_general = level_loss(out.general, general_ranks)
        else:
            l_general = multiclass_loss(out.general, general_ranks)
        if out.fine is None:
            return LossTriple(l_general, None, l_general)
        l_fine = level_loss(out.fine, fine_ranks)
        return LossTriple(l_general, l_fine, joint_loss(l_general, l_fine, weights))

    def general_scores(self, out: NetworkOutput) -> np.ndarray:
        """Per-level score matrix (N, K) for ROC analysis."""
        if isinstance(out.general, OrdinalPrediction):
            return level_scores(out.general.positive_probs)
        return out.general.yhat

    def fine_scores(self, out: NetworkOutput) -> Optional[np.ndarray]:
        if out.fine is None:
            return None
        return level_scores(out.fine.positive_probs)
