"""Symmetric feature matching: fuse the two backbone paths.

The original-path and flipped-path maps are fused once (cat-conv), each path
is then matched against the fused map with single-head attention (fused map
as key and value, path map as query), and the two attended maps are fused
again.  Shapes are preserved end to end: CxHxW in, CxHxW out.
"""

from __future__ import annotations

import numpy as np

from .layers import AttentionConfig, CatConv, Module, attention, attention_weights
from .tensor import Tensor, ShapeError, reshape, transpose_last2


def _to_tokens(x: Tensor) -> Tensor:
    """Row-major flatten of the spatial grid: CxHxW -> (H*W)xC tokens."""
    if x.ndim == 4:
        n, c, h, w = x.shape
        return transpose_last2(reshape(x, (n, c, h * w)))
    if x.ndim == 3:
        c, h, w = x.shape
        return transpose_last2(reshape(x, (c, h * w)))
    raise ShapeError(f"expected CxHxW or NxCxHxW feature map, got {x.shape}")


def _from_tokens(tokens: Tensor, like_shape: tuple[int, ...]) -> Tensor:
    return reshape(transpose_last2(tokens), like_shape)


class SymmetricMatching(Module):
    """Two cat-conv fusions around a pair of attention matchings."""

    def __init__(self, channels: int, use_projections: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        self.fuse_in = CatConv(channels, rng=rng)
        self.fuse_out = CatConv(channels, rng=rng)
        self.channels = channels
        self.use_projections = use_projections
        if use_projections:
            std = 1.0 / np.sqrt(channels)
            self.wq = Tensor.param(rng.normal(0.0, std, (channels, channels)))
            self.wk = Tensor.param(rng.normal(0.0, std, (channels, channels)))
            self.wv = Tensor.param(rng.normal(0.0, std, (channels, channels)))

    def attention_config(self) -> AttentionConfig:
        if self.use_projections:
            return AttentionConfig(self.channels, True, self.wq, self.wk, self.wv)
        return AttentionConfig(self.channels)

    def forward(self, f: Tensor, ff: Tensor) -> Tensor:
        if f.shape != ff.shape:
            raise ShapeError(f"matching: shapes differ, {f.shape} vs {ff.shape}")
        if f.shape[-3] != self.channels:
            raise ShapeError(
                f"matching: expected {self.channels} channels, got {f.shape[-3]}")
        cfg = self.attention_config()
        fused = self.fuse_in.forward(f, ff)
        kv = _to_tokens(fused)  # one key/value token set shared by both queries
        matched = attention(_to_tokens(f), kv, kv, cfg)
        matched_f = attention(_to_tokens(ff), kv, kv, cfg)
        return self.fuse_out.forward(_from_tokens(matched, f.shape),
                                     _from_tokens(matched_f, f.shape))


def sfmm_forward(f: Tensor, ff: Tensor, params: SymmetricMatching) -> Tensor:
    return params.forward(f, ff)


def attention_scores(fq: Tensor, fc: Tensor,
                     params: "SymmetricMatching | AttentionConfig") -> Tensor:
    """Row-stochastic matching scores between a query map and the fused map."""
    cfg = params.attention_config() if isinstance(params, SymmetricMatching) else params
    return attention_weights(_to_tokens(fq), _to_tokens(fc), cfg)
