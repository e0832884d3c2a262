"""Training: decoupled-weight-decay Adam, cosine schedule with linear warmup,
epoch loop over both branches, cross-validation folds, binary checkpoints.

Everything is a pure function of (config, master seed): shuffling, DropPath,
augmentation and fold assignment all draw from generators derived from the
seed, so a rerun reproduces losses and parameters bit for bit.
"""

from __future__ import annotations

import math
import struct
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional speedup only
    threadpool_limits = None

from .data import AugmentPolicy, IDENTITY_POLICY, Sample, augment, crop_bbox
from .layers import Module
from .metrics import MetricsReport, compute_report
from .network import NetworkConfig, SeverityNet
from .ordinal import LossWeights
from .tensor import Tape, Tensor


class AdamW:
    """Adam with decoupled weight decay.

    Update (t incremented first): m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
    mhat = m/(1-b1^t); vhat = v/(1-b2^t);
    theta <- theta - lr*mhat/(sqrt(vhat)+eps) - lr*wd*theta.
    """

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(
                    f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adamw_step(params: Sequence[tuple[str, Tensor]], optim: AdamW,
               lr: float | None = None) -> None:
    """Single optimizer step over ``params`` (grads must be populated)."""
    optim.step(lr)


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to lr_max, then cosine decay to lr_min."""
    lr_max: float
    total_epochs: int
    warmup_epochs: int = -1          # -1: 5% of total, rounded up
    lr_min: float = 1e-6

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")
        if self.warmup_epochs < 0:
            object.__setattr__(self, "warmup_epochs",
                               min(math.ceil(0.05 * self.total_epochs),
                                   self.total_epochs - 1))
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"warmup {self.warmup_epochs} must lie in [0, {self.total_epochs})")


def lr_at(epoch: int, s: Schedule) -> float:
    if epoch < 0 or epoch > s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    w, t = s.warmup_epochs, s.total_epochs
    if epoch < w:
        return s.lr_max * (epoch + 1) / w
    if epoch == w:
        return s.lr_max
    if epoch == t:
        return s.lr_min
    phase = math.pi * (epoch - w) / (t - w)
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + math.cos(phase))


# ---------------------------------------------------------------------------
# folds

def fold_split(n: int, folds: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Shuffled partition of range(n) into ``folds`` near-equal index lists;
    stable for a given seed."""
    if n < folds:
        raise ValueError(f"cannot split {n} samples into {folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF01D)))
    order = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def holdout_split(n: int, frac: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < frac < 1:
        raise ValueError(f"holdout fraction {frac} outside (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x401D)))
    order = rng.permutation(n)
    cut = max(1, int(round(n * frac)))
    return np.sort(order[cut:]), np.sort(order[:cut])


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-4
    lr_min: float = 1e-6
    warmup_epochs: int = -1
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=lambda: LossWeights(0.5, 0.5))
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    input_size: tuple[int, int] = (64, 64)
    seed: int = 0
    # one BLAS thread wins at desk-scale tensor sizes (thread sync costs more
    # than it buys on small batched GEMMs); None leaves the pool alone
    blas_threads: Optional[int] = 1

    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.epochs, self.warmup_epochs, self.lr_min)


@dataclass
class EpochLosses:
    general: float
    fine: float
    total: float


def _batch_arrays(samples: Sequence[Sample], size: tuple[int, int],
                  rng: np.random.Generator | None,
                  policy: AugmentPolicy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    imgs = []
    for s in samples:
        if rng is not None:
            s = augment(s, rng, policy)
        imgs.append(crop_bbox(s, size))
    x = np.stack(imgs, axis=0)
    g = np.array([s.general_level for s in samples], dtype=np.int64)
    f = np.array([s.fine_level for s in samples], dtype=np.int64)
    return x, g, f


def train_epoch(model: SeverityNet, samples: Sequence[Sample], optim: AdamW,
                lr: float, rng: np.random.Generator, cfg: TrainConfig) -> EpochLosses:
    """One shuffled pass; returns sample-weighted mean losses."""
    if not samples:
        raise ValueError("empty training set")
    model.set_mode("train")
    order = rng.permutation(len(samples))
    tg = tf = tt = 0.0
    seen = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        if len(idx) < 2:
            continue  # batch norm needs at least two samples
        batch = [samples[i] for i in idx]
        x, g, f = _batch_arrays(batch, cfg.input_size, rng, cfg.augment)
        tape = Tape()
        out = model.forward(x, tape=tape, rng=rng)
        losses = model.compute_loss(out, g, f, cfg.weights)
        tape.backward(losses.total)
        optim.step(lr)
        optim.zero_grad()
        tape.clear()
        n = len(idx)
        tg += losses.general.item() * n
        tf += (losses.fine.item() if losses.fine is not None else 0.0) * n
        tt += losses.total.item() * n
        seen += n
    if seen == 0:
        raise ValueError("no trainable batches (all smaller than 2 samples)")
    return EpochLosses(tg / seen, tf / seen, tt / seen)


@dataclass
class TrainResult:
    model: SeverityNet
    history: list[tuple[int, float, float, float, float]]  # epoch, lg, lf, lt, lr

    def history_csv(self) -> str:
        lines = ["epoch,l_general,l_fine,l_total,lr"]
        for epoch, lg, lf, lt, lr in self.history:
            lines.append(f"{epoch},{lg!r},{lf!r},{lt!r},{lr!r}")
        return "\n".join(lines) + "\n"


def _thread_limit(n: Optional[int]):
    if n is None or threadpool_limits is None:
        return nullcontext()
    return threadpool_limits(limits=n)


def fit(model: SeverityNet, samples: Sequence[Sample], cfg: TrainConfig,
        log_path: Path | None = None) -> TrainResult:
    optim = AdamW([(n, p) for n, p in model.named_parameters()],
                  lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                  weight_decay=cfg.weight_decay)
    schedule = cfg.schedule()
    history = []
    with _thread_limit(cfg.blas_threads):
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, 0x7EA1, epoch)))
            lr = lr_at(epoch, schedule)
            losses = train_epoch(model, samples, optim, lr, rng, cfg)
            history.append((epoch, losses.general, losses.fine, losses.total, lr))
    result = TrainResult(model, history)
    if log_path is not None:
        Path(log_path).write_text(result.history_csv(), encoding="utf-8")
    return result


@dataclass
class Predictions:
    general_true: np.ndarray
    general_pred: np.ndarray
    general_scores: np.ndarray
    fine_true: Optional[np.ndarray]
    fine_pred: Optional[np.ndarray]
    fine_scores: Optional[np.ndarray]


def predict(model: SeverityNet, samples: Sequence[Sample],
            input_size: tuple[int, int] = (64, 64),
            batch_size: int = 32) -> Predictions:
    """Eval-mode predictions over a sample list (no augmentation, no tape)."""
    if not samples:
        raise ValueError("empty evaluation set")
    model.set_mode("eval")
    gp, gs, fp, fs = [], [], [], []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        x, _, _ = _batch_arrays(batch, input_size, None, IDENTITY_POLICY)
        out = model.forward(x)
        gp.append(out.general.rhat)
        gs.append(model.general_scores(out))
        if out.fine is not None:
            fp.append(out.fine.rhat)
            fs.append(model.fine_scores(out))
    g_true = np.array([s.general_level for s in samples], dtype=np.int64)
    f_true = np.array([s.fine_level for s in samples], dtype=np.int64)
    has_fine = bool(fp)
    return Predictions(
        g_true, np.concatenate(gp), np.concatenate(gs),
        f_true if has_fine else None,
        np.concatenate(fp) if has_fine else None,
        np.concatenate(fs) if has_fine else None)


def evaluate(model: SeverityNet, samples: Sequence[Sample],
             input_size: tuple[int, int] = (64, 64)
             ) -> tuple[MetricsReport, Optional[MetricsReport]]:
    """(general report, fine report or None) on the given samples."""
    preds = predict(model, samples, input_size)
    general = compute_report(preds.general_true, preds.general_pred,
                             model.cfg.general_levels, preds.general_scores)
    fine = None
    if preds.fine_pred is not None:
        fine = compute_report(preds.fine_true, preds.fine_pred,
                              model.cfg.fine_levels, preds.fine_scores)
    return general, fine


@dataclass
class FoldOutcome:
    fold: int
    general: MetricsReport
    fine: Optional[MetricsReport]


@dataclass
class CrossValidationResult:
    folds: list[FoldOutcome]
    mean_general_acc: float
    mean_general_mae: float

    @classmethod
    def from_folds(cls, folds: list[FoldOutcome]) -> "CrossValidationResult":
        accs = [f.general.acc for f in folds]
        maes = [f.general.mae for f in folds]
        return cls(folds, float(np.mean(accs)), float(np.mean(maes)))


def five_fold(samples: Sequence[Sample], net_cfg: NetworkConfig,
              train_cfg: TrainConfig, folds: int = 5) -> CrossValidationResult:
    """Independent training per fold: four folds train, the held fold tests."""
    parts = fold_split(len(samples), folds, train_cfg.seed)
    outcomes = []
    for i, test_idx in enumerate(parts):
        test_set = set(test_idx.tolist())
        train_samples = [s for j, s in enumerate(samples) if j not in test_set]
        test_samples = [samples[j] for j in test_idx]
        model = SeverityNet(net_cfg, seed=train_cfg.seed + i)
        fit(model, train_samples, train_cfg)
        general, fine = evaluate(model, test_samples, train_cfg.input_size)
        outcomes.append(FoldOutcome(i, general, fine))
    return CrossValidationResult.from_folds(outcomes)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SPODR1\n"
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: dict[str, np.ndarray] | Module, path: Path) -> None:
    """Binary dump, tensors sorted by name; round-trips bit-exactly."""
    if isinstance(state, Module):
        state = {name: t.data for name, t in state.named_state()}
    names = sorted(state)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.asarray(state[name])
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint (wanted {n} bytes, got {len(buf)})")
    return buf


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"magic mismatch in {path}: {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            if name in state:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            data = np.frombuffer(_read_exact(fh, nbytes),
                                 dtype=dtype.newbyteorder("<")).astype(dtype)
            state[name] = data.reshape(dims)
        if fh.read(1):
            raise CheckpointError(f"trailing bytes in {path}")
    return state
