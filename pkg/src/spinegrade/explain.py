"""Grad-CAM heatmaps for the grading network.

The target scalar for an ordinal head is the sum of the positive-class
pre-softmax logits of the classifiers asserting severity beyond each
threshold the decoded rank crossed (classifiers k < decoded rank); for a
multi-class head it is the predicted class logit.  Channel weights are the
spatial means of the score gradient on the chosen activation; the map is the
rectified weighted channel sum, min-max normalized into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import bilinear_resize
from .network import NetworkOutput, SeverityNet
from .ordinal import OrdinalPrediction
from .tensor import Tape, Tensor, column, mul, reduce_sum


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1], feature-map resolution
    layer: str
    target: str


def _target_score(out: NetworkOutput) -> tuple[Tensor, str]:
    pred = out.general
    if isinstance(pred, OrdinalPrediction):
        rank = int(pred.rhat[0])
        mask = np.zeros_like(pred.logits.data)
        mask[0, :rank - 1, 0] = 1.0  # positive-class logits of crossed thresholds
        score = reduce_sum(mul(pred.logits, Tensor(mask)))
        return score, f"rank {rank} (sum of {rank - 1} crossed-threshold logits)"
    cls = int(pred.rhat[0])
    return reduce_sum(column(pred.logits, cls - 1)), f"class {cls} logit"


def gradcam(model: SeverityNet, image: np.ndarray,
            target_layer: str = "matching_general") -> Heatmap:
    """Heatmap localizing the evidence for the decoded general level.

    ``image`` is one (C, H, W) network input; the model runs in eval mode.
    """
    model.set_mode("eval")
    tape = Tape()
    out = model.forward(image[None] if image.ndim == 3 else image, tape=tape)
    if target_layer not in out.activations:
        raise KeyError(
            f"unknown layer {target_layer!r}; available: {sorted(out.activations)}")
    act = out.activations[target_layer]
    score, target_desc = _target_score(out)
    tape.backward(score)
    grads = act.grad
    if grads is None:  # constant score: no gradient reaches the activation
        cam = np.zeros(act.shape[-2:])
    else:
        weights = grads[0].mean(axis=(1, 2))
        cam = np.maximum((weights[:, None, None] * act.data[0]).sum(axis=0), 0.0)
    peak, low = cam.max(), cam.min()
    if peak > low:
        cam = (cam - low) / (peak - low)
    elif peak > 0:
        cam = np.ones_like(cam)  # constant positive map: degenerate min-max
    tape.clear()
    model.zero_grad()
    return Heatmap(cam, target_layer, target_desc)


def overlay(heatmap: Heatmap, image: np.ndarray, path, alpha: float = 0.4) -> None:
    """Blend the (upsampled) heatmap over a grayscale image as a red overlay
    and write a PNG; alpha 0 reproduces the input image exactly."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    gray = image[0] if image.ndim == 3 else image
    h, w = gray.shape
    heat = bilinear_resize(heatmap.values[None], h, w)[0]
    base = np.clip(gray, 0.0, 1.0)
    rgb = np.stack([(1 - alpha) * base + alpha * heat,
                    (1 - alpha) * base,
                    (1 - alpha) * base], axis=-1)
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="RGB").save(path)
    except OSError as exc:
        raise OSError(f"cannot write overlay {path}: {exc}") from exc
