"""Ordinal regression head: rank-to-binary decomposition.

A K-rank grading task becomes K-1 binary sub-problems ("is the rank greater
than k?").  Each sub-classifier is a 2-way linear layer with softmax on top
of the globally pooled feature.  Decoding sums the rounded positive
probabilities; encoding produces the (K-1)x2 target matrix whose first
column is monotone non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import Linear, Module, global_avg_pool
from .tensor import (Tensor, add, clip, column, log, mul, neg, reduce_mean,
                     reshape, softmax, stack_along, sub)

PROB_CLAMP = 1e-12  # probabilities clamped to [PROB_CLAMP, 1-PROB_CLAMP] before logs


@dataclass(frozen=True)
class OrdinalTarget:
    """Ground-truth rank ``r`` in [1, K] and its binary-decomposition matrix."""
    levels: int
    rank: int
    matrix: np.ndarray  # (K-1, 2), rows are one-hot

    @property
    def first_column(self) -> np.ndarray:
        return self.matrix[:, 0]


def encode_rank(rank: int, levels: int) -> OrdinalTarget:
    """Row k (1-based) is [1, 0] iff rank > k, else [0, 1]."""
    if levels < 2:
        raise ValueError(f"need at least 2 levels, got {levels}")
    if not 1 <= rank <= levels:
        raise ValueError(f"rank {rank} outside [1, {levels}]")
    pos = (rank > np.arange(1, levels)).astype(np.float64)
    return OrdinalTarget(levels, rank, np.stack([pos, 1.0 - pos], axis=1))


def decode_rank(positive_probs: Sequence[float] | np.ndarray) -> int:
    """Rank = 1 + sum of rounded positive probabilities (half rounds up)."""
    p = np.asarray(positive_probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a vector of K-1 probabilities, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return 1 + int(np.floor(p + 0.5).sum())


def decode_rank_batch(positive_probs: np.ndarray) -> np.ndarray:
    p = np.asarray(positive_probs, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return 1 + np.floor(p + 0.5).sum(axis=-1).astype(np.int64)


@dataclass
class OrdinalPrediction:
    """Batched head output.

    ``yhat`` holds detached softmax probabilities, shape (N, K-1, 2);
    ``rhat`` the decoded ranks, shape (N,).  The live stacked tensors
    (``probs``, ``logits``, also (N, K-1, 2)) stay attached to the tape for
    loss and explanation gradients.
    """
    levels: int
    yhat: np.ndarray
    rhat: np.ndarray
    probs: Tensor
    logits: Tensor

    @property
    def positive_probs(self) -> np.ndarray:
        return self.yhat[:, :, 0]


class OrdinalHead(Module):
    """Global average pooling followed by K-1 independent 2-way classifiers."""

    def __init__(self, channels: int, levels: int,
                 rng: np.random.Generator | None = None):
        if levels < 2:
            raise ValueError(f"need at least 2 levels, got {levels}")
        self.levels = levels
        self.classifiers = [Linear(channels, 2, rng=rng) for _ in range(levels - 1)]

    def forward(self, feat: Tensor) -> OrdinalPrediction:
        if feat.ndim in (3, 4):
            pooled = global_avg_pool(feat)
        else:
            pooled = feat
        if pooled.ndim == 1:
            pooled = reshape(pooled, (1, pooled.shape[0]))
        logits = stack_along([clf.forward(pooled) for clf in self.classifiers], axis=1)
        probs = softmax(logits, axis=-1)
        yhat = probs.data.copy()
        rhat = decode_rank_batch(yhat[:, :, 0])
        return OrdinalPrediction(self.levels, yhat, rhat, probs, logits)


def orh_forward(feat: Tensor, head: OrdinalHead) -> OrdinalPrediction:
    return head.forward(feat)


def _target_matrix(targets, levels: int, batch: int) -> np.ndarray:
    """First-column target matrix, shape (N, K-1)."""
    if isinstance(targets, OrdinalTarget):
        targets = [targets]
    rows = []
    for t in targets:
        if isinstance(t, OrdinalTarget):
            if t.levels != levels:
                raise ValueError(f"target has {t.levels} levels, prediction has {levels}")
            rows.append(t.first_column)
        else:
            rows.append(encode_rank(int(t), levels).first_column)
    if len(rows) != batch:
        raise ValueError(f"{len(rows)} targets for a batch of {batch}")
    return np.stack(rows, axis=0)


def level_loss(pred: OrdinalPrediction, targets) -> Tensor:
    """Mean binary cross-entropy over the K-1 classifiers (and the batch).

    ``targets`` may be one OrdinalTarget, a sequence of them, or a sequence
    of integer ranks.
    """
    batch = pred.yhat.shape[0]
    y = _target_matrix(targets, pred.levels, batch)  # (N, K-1)
    p1 = clip(column(pred.probs, 0), PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_classifier = add(mul(Tensor(y), log(p1)),
                         mul(Tensor(1.0 - y), log(sub(1.0, p1))))
    return neg(reduce_mean(per_classifier))


@dataclass(frozen=True)
class LossWeights:
    """Convex weights for the general/fine joint objective (must sum to 1)."""
    lambda_general: float
    lambda_fine: float

    def __post_init__(self):
        if self.lambda_general < 0 or self.lambda_fine < 0:
            raise ValueError("loss weights must be non-negative")
        if abs(self.lambda_general + self.lambda_fine - 1.0) > 1e-9:
            raise ValueError(
                f"loss weights must sum to 1, got {self.lambda_general} + {self.lambda_fine}")

    @classmethod
    def from_ratio(cls, general: float, fine: float) -> "LossWeights":
        if general < 0 or fine < 0 or general + fine == 0:
            raise ValueError(f"invalid ratio {general}:{fine}")
        s = general + fine
        return cls(general / s, fine / s)


def joint_loss(general: Tensor, fine: Tensor, weights: LossWeights) -> Tensor:
    return add(mul(general, weights.lambda_general),
               mul(fine, weights.lambda_fine))


def level_scores(positive_probs: np.ndarray) -> np.ndarray:
    """Per-level pseudo-probabilities from cumulative positive probabilities.

    p(level j) = P(rank > j-1) - P(rank > j) with the boundary conventions
    P(rank > 0) = 1 and P(rank > K) = 0; negative differences (possible for
    non-monotone classifier outputs) are clamped to 0 and the vector is
    renormalized.  Accepts (K-1,) or (N, K-1).
    """
    p = np.asarray(positive_probs, dtype=np.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    n = p.shape[0]
    padded = np.concatenate([np.ones((n, 1)), p, np.zeros((n, 1))], axis=1)
    diffs = np.clip(padded[:, :-1] - padded[:, 1:], 0.0, None)
    diffs /= diffs.sum(axis=1, keepdims=True)
    return diffs[0] if squeeze else diffs
