"""Weight-sharing convolutional feature extractor.

One parameter set serves both paths of the network: the original image and
its horizontally flipped copy run through the same stack, so sharing is
structural rather than copied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm2d, Conv2d, DropPathConfig, Module, droppath
from .tensor import (Tensor, ShapeError, concat_batch, flip_width, relu,
                     slice_batch)

StageSpec = tuple[int, int, int]  # (channels, num_blocks, stride)

DEFAULT_STAGES: tuple[StageSpec, ...] = ((16, 2, 2), (32, 2, 2), (64, 2, 2))


@dataclass
class BackboneConfig:
    stages: tuple[StageSpec, ...] = DEFAULT_STAGES
    in_channels: int = 1
    drop_path: float = 0.1

    @property
    def total_stride(self) -> int:
        s = 1
        for _, _, stride in self.stages:
            s *= stride
        return s

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]


class ConvBlock(Module):
    """conv3x3 -> BN -> ReLU; identity residual with DropPath when the block
    preserves shape (stride 1, equal channels)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 drop_path: float, rng: np.random.Generator):
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride,
                           padding=1, rng=rng)
        self.bn = BatchNorm2d(out_channels)
        self.residual = in_channels == out_channels and stride == 1
        self.drop_prob = drop_path if self.residual else 0.0

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        y = relu(self.bn.forward(self.conv.forward(x)))
        if not self.residual:
            return y
        return droppath(x, y, DropPathConfig(self.drop_prob, self.mode), rng)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        blocks: list[ConvBlock] = []
        cin = cfg.in_channels
        for channels, num_blocks, stride in cfg.stages:
            for i in range(num_blocks):
                blocks.append(ConvBlock(cin, channels, stride if i == 0 else 1,
                                        cfg.drop_path, rng))
                cin = channels
        self.blocks = blocks

    def forward(self, img: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if img.ndim != 4:
            raise ShapeError(f"backbone expects NxCxHxW input, got {img.shape}")
        stride = self.cfg.total_stride
        _, _, h, w = img.shape
        if h % stride or w % stride:
            raise ShapeError(
                f"input {h}x{w} not divisible by total stride {stride}")
        x = img
        for block in self.blocks:
            x = block.forward(x, rng)
        return x


def backbone_forward(img: Tensor, backbone: Backbone,
                     rng: np.random.Generator | None = None) -> Tensor:
    return backbone.forward(img, rng)


def dual_path(img: Tensor, backbone: Backbone,
              rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Features of the image and of its horizontal flip, from one shared
    parameter set.

    Both paths run as a single doubled batch.  This changes nothing
    semantically: convolutions act per sample, and batch-norm statistics over
    the union equal those over the originals because per-channel sums are
    invariant under width reversal.
    """
    n = img.shape[0]
    both = concat_batch(img, flip_width(img))
    feats = backbone.forward(both, rng)
    return slice_batch(feats, 0, n), slice_batch(feats, n, 2 * n)
