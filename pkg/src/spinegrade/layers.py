"""Neural building blocks: convolution, batch norm, linear, attention, DropPath.

Convolution and batch norm carry hand-written gradients (recorded through
``tensor.make_op``) because the im2col/GEMM formulation is far faster than a
graph of primitives; everything else composes tensor ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import (Tensor, ShapeError, add, concat_channels, make_op,
                     matmul, mul, reduce_mean, relu, reshape, softmax,
                     transpose_last2)


class Module:
    """Minimal parameter container with attribute-based discovery."""

    mode: str = "train"

    def _children(self) -> Iterator[tuple[str, "Module | Tensor"]]:
        for name, val in vars(self).items():
            if isinstance(val, (Module, Tensor)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """All tensors (parameters and buffers), with dotted names."""
        for name, val in self._children():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield full, val
            else:
                yield from val.named_state(f"{full}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_state(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.set_mode(mode)

    def cast(self, dtype) -> None:
        """In-place precision cast of all tensors (e.g. float32 inference)."""
        for _, t in self.named_state():
            t.data = t.data.astype(dtype)
            t.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_state())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, t in own.items():
            arr = state[name]
            if tuple(arr.shape) != t.shape:
                raise ShapeError(
                    f"state {name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Patch matrix (N, C*kh*kw, out_h*out_w) gathered from the padded input."""
    n, c, _, _ = xp.shape
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, out_h, out_w),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride), writeable=False)
    return windows.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(dcols: np.ndarray, n: int, c: int, h: int, w: int,
            kh: int, kw: int, stride: int, pad: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the (unpadded) input."""
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dc = dcols.reshape(n, c, kh, kw, out_h, out_w)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + stride * out_h:stride,
                kj:kj + stride * out_w:stride] += dc[:, :, ki, kj]
    if pad == 0:
        return dxp
    return dxp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation (no kernel flip) of NxCxHxW input."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NxCxHxW input, got {x.shape}")
    n, cin, h, w = x.shape
    cout, cw, kh, kw = weight.shape
    if cin != cw:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: spatial dims {h}x{w} smaller than kernel {kh}x{kw}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    pointwise = (kh == 1 and kw == 1 and stride == 1 and padding == 0)
    if pointwise:
        cols = x.data.reshape(n, cin, h * w)  # no gather needed
    else:
        xp = x.data if padding == 0 else np.pad(
            x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols  # batched GEMM, lands directly in NCHW order
    if bias is not None:
        out += bias.data[:, None]
    data = out.reshape(n, cout, out_h, out_w)

    def vjp(g):
        g3 = g.reshape(n, cout, out_h * out_w)
        dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        db = g3.sum(axis=(0, 2)) if bias is not None else None
        if pointwise:
            dx = np.matmul(np.ascontiguousarray(wmat.T), g3).reshape(n, cin, h, w)
        elif stride == 1:
            # input gradient is itself a correlation: flipped, channel-swapped
            # kernel applied to the output gradient
            wt = np.ascontiguousarray(
                weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).reshape(cin, -1)
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2,
                            (kw - 1 - padding,) * 2))
            gcols = _im2col(gp, kh, kw, 1, h, w)
            dx = np.matmul(wt, gcols).reshape(n, cin, h, w)
        else:
            dcols = np.matmul(np.ascontiguousarray(wmat.T), g3)
            dx = _col2im(dcols, n, cin, h, w, kh, kw, stride, padding, out_h, out_w)
        return dx, dw, db

    return make_op(data, (x, weight, bias), vjp)


class Conv2d(Module):
    """2-D convolution layer; He-normal weight init."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        fan_in = in_channels * kernel * kernel
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor.param(
            rng.normal(0.0, std, (out_channels, in_channels, kernel, kernel)))
        self.bias = Tensor.param(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNorm2d(Module):
    """Per-channel batch norm over (N, H, W).

    Train mode normalizes with batch statistics (population variance) and
    updates the running buffers; eval mode is a pure function of the running
    statistics.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor.param(np.ones(channels))
        self.beta = Tensor.param(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"batchnorm2d expects NxCxHxW input, got {x.shape}")
        n = x.shape[0]
        training = self.mode == "train"
        if training:
            if n < 2:
                raise ValueError("batchnorm2d: train mode needs batch size >= 2")
            mean = x.data.mean(axis=(0, 2, 3))
            sq = np.einsum("nchw,nchw->c", x.data, x.data) / (n * x.shape[2] * x.shape[3])
            var = sq - mean * mean
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mean
            self.running_var.data = (1 - m) * self.running_var.data + m * var
        else:
            mean = self.running_mean.data
            var = self.running_var.data
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = x.data - mean[:, None, None]
        xhat *= inv[:, None, None]
        data = xhat * self.gamma.data[:, None, None]
        data += self.beta.data[:, None, None]
        count = n * x.shape[2] * x.shape[3]
        gamma = self.gamma

        def vjp(g):
            dgamma = np.einsum("nchw,nchw->c", g, xhat)
            dbeta = g.sum(axis=(0, 2, 3))
            scale = (gamma.data * inv)[:, None, None]
            if training:
                dx = xhat * (-dgamma / count)[:, None, None]
                dx += g
                dx -= (dbeta / count)[:, None, None]
                dx *= scale
            else:
                dx = g * scale
            return dx, dgamma, dbeta

        return make_op(data, (x, self.gamma, self.beta), vjp)


# ---------------------------------------------------------------------------
# linear

class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, init_std: float | None = None):
        rng = rng or np.random.default_rng()
        std = init_std if init_std is not None else math.sqrt(1.0 / in_features)
        self.weight = Tensor.param(rng.normal(0.0, std, (out_features, in_features)))
        self.bias = Tensor.param(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(x, transpose_last2(self.weight)), self.bias)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a CxHxW or NxCxHxW map."""
    if x.ndim == 4:
        return reduce_mean(x, axis=(2, 3))
    if x.ndim == 3:
        return reduce_mean(x, axis=(1, 2))
    raise ShapeError(f"global_avg_pool expects rank 3 or 4, got {x.shape}")


# ---------------------------------------------------------------------------
# scaled dot-product attention

@dataclass
class AttentionConfig:
    """Single-head attention over token sequences of channel dim ``d``.

    Projections are off by default: queries/keys/values are used as given.
    """
    d: int
    use_projections: bool = False
    wq: Optional[Tensor] = None
    wk: Optional[Tensor] = None
    wv: Optional[Tensor] = None

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError(f"attention dim must be positive, got {self.d}")
        if self.use_projections:
            for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
                if w is None or w.shape != (self.d, self.d):
                    raise ShapeError(f"projection {name} must be {self.d}x{self.d}")


def _check_tokens(name: str, t: Tensor, d: int) -> None:
    if t.ndim not in (2, 3) or t.shape[-1] != d:
        raise ShapeError(f"attention {name}: expected tokens of dim {d}, got {t.shape}")


def attention_weights(q: Tensor, k: Tensor, cfg: AttentionConfig) -> Tensor:
    """Row-stochastic score matrix softmax(Q K^T / sqrt(d))."""
    _check_tokens("Q", q, cfg.d)
    _check_tokens("K", k, cfg.d)
    if cfg.use_projections:
        q = matmul(q, cfg.wq)
        k = matmul(k, cfg.wk)
    logits = mul(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(cfg.d))
    return softmax(logits, axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    _check_tokens("V", v, cfg.d)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: K has {k.shape[-2]} tokens, V has {v.shape[-2]}")
    scores = attention_weights(q, k, cfg)
    if cfg.use_projections:
        v = matmul(v, cfg.wv)
    return matmul(scores, v)


# ---------------------------------------------------------------------------
# DropPath (stochastic depth)

@dataclass
class DropPathConfig:
    drop_prob: float = 0.0
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError(f"drop_prob must be in [0, 1), got {self.drop_prob}")


def droppath(x: Tensor, residual: Tensor, cfg: DropPathConfig,
             rng: np.random.Generator | None = None) -> Tensor:
    """Residual add with per-sample stochastic depth.

    Eval mode (or p=0) is exactly ``x + residual``; train mode keeps each
    sample's residual with probability 1-p and rescales survivors by 1/(1-p),
    so the expectation matches eval behavior.
    """
    if x.shape != residual.shape:
        raise ShapeError(f"droppath: shapes differ, {x.shape} vs {residual.shape}")
    p = cfg.drop_prob
    if cfg.mode == "eval" or p == 0.0:
        return add(x, residual)
    if rng is None:
        raise ValueError("droppath: train mode with p > 0 needs an rng")
    if x.ndim == 4:
        keep = (rng.random(x.shape[0]) >= p).astype(x.data.dtype)
        mask = keep.reshape(-1, 1, 1, 1) / (1.0 - p)
    else:
        keep = float(rng.random() >= p)
        mask = np.full((1,) * x.ndim, keep / (1.0 - p), dtype=x.data.dtype)
    return add(x, mul(residual, Tensor(mask)))


# ---------------------------------------------------------------------------
# concat -> 1x1 conv -> 3x3 conv -> BN -> ReLU fusion block

class CatConv(Module):
    """Fuse two same-shape feature maps: concat, reduce 2C->C with a 1x1
    conv, mix with a 3x3 conv (padding 1), batch-normalize, rectify."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.reduce = Conv2d(2 * channels, channels, 1, rng=rng)
        self.mix = Conv2d(channels, channels, 3, padding=1, rng=rng)
        self.bn = BatchNorm2d(channels)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"cat_conv: shapes differ, {a.shape} vs {b.shape}")
        single = a.ndim == 3
        if single:
            a = reshape(a, (1,) + a.shape)
            b = reshape(b, (1,) + b.shape)
        fused = concat_channels(a, b)
        out = relu(self.bn.forward(self.mix.forward(self.reduce.forward(fused))))
        return reshape(out, out.shape[1:]) if single else out


def cat_conv(a: Tensor, b: Tensor, params: CatConv) -> Tensor:
    return params.forward(a, b)
