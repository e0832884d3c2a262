"""Command-line entry point: synth / train / eval / explain.

Configuration is a flat key=value file mirroring every module default;
command-line flags override file values, unknown keys are rejected, and
every run writes its fully-resolved configuration next to its outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .data import (AugmentPolicy, Sample, SynthConfig, bilinear_resize,
                   crop_bbox, load_corpus, load_image, scheme_by_name,
                   generate_corpus, write_synth_config)
from .explain import gradcam, overlay
from .metrics import compute_report
from .network import VARIANTS, NetworkConfig, SeverityNet
from .ordinal import LossWeights
from .train import (TrainConfig, evaluate, fit, fold_split, holdout_split,
                    load_checkpoint, predict, save_checkpoint)


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every tunable default in one flat namespace."""
    # synthetic corpus
    height: int = 64
    width: int = 64
    bend_scale: float = 2.2
    tilt_per_deg: float = 0.006
    bump_per_deg: float = 0.007
    waist_shift_per_deg: float = 0.10
    width_jitter: float = 0.08
    intensity_jitter: float = 0.15
    brightness_jitter: float = 0.10
    band_shift_px: float = 1.5
    noise_std: float = 0.02
    max_angle: float = 80.0
    # network
    stages: str = "16:2:2,32:2:2,64:2:2"
    in_channels: int = 1
    drop_path: float = 0.1
    use_projections: bool = False
    variant: str = "full"
    # training
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-4
    lr_min: float = 1e-6
    warmup_epochs: int = -1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_ratio: str = "1:1"
    holdout_frac: float = 0.2
    # augmentation
    flip_prob: float = 0.5
    crop_frac: float = 0.05
    scale_range: float = 0.05
    brightness: float = 0.05
    contrast: float = 0.05
    # misc
    seed: int = 0
    blas_threads: int = 1

    def dump(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}"
                         for f in fields(self)) + "\n"

    # --- conversions into module configs ---

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.height, self.width, self.bend_scale,
                           self.tilt_per_deg, self.bump_per_deg,
                           self.waist_shift_per_deg, self.width_jitter,
                           self.intensity_jitter, self.brightness_jitter,
                           self.band_shift_px, self.noise_std,
                           self.max_angle, self.seed)

    def parsed_stages(self) -> tuple[tuple[int, int, int], ...]:
        stages = []
        for part in self.stages.split(","):
            bits = part.strip().split(":")
            if len(bits) != 3:
                raise UsageError(
                    f"bad stages entry {part!r}; expected channels:blocks:stride")
            stages.append(tuple(int(b) for b in bits))
        return tuple(stages)

    def network_config(self) -> NetworkConfig:
        backbone = BackboneConfig(self.parsed_stages(), self.in_channels,
                                  self.drop_path)
        return NetworkConfig(backbone, self.variant,
                             use_projections=self.use_projections)

    def loss_weights(self) -> LossWeights:
        bits = self.loss_ratio.split(":")
        if len(bits) != 2:
            raise UsageError(f"bad loss ratio {self.loss_ratio!r}; expected G:F")
        try:
            return LossWeights.from_ratio(float(bits[0]), float(bits[1]))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.flip_prob, self.crop_frac, self.scale_range,
                             self.brightness, self.contrast)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_min=self.lr_min, warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay, betas=(self.beta1, self.beta2),
            eps=self.eps, weights=self.loss_weights(),
            augment=self.augment_policy(),
            input_size=(self.height, self.width), seed=self.seed,
            blas_threads=self.blas_threads or None)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key}: {exc}") from exc
    return raw


def load_run_config(path: Path | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, value)
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    cfg = RunConfig(**values)
    if cfg.variant not in VARIANTS:
        raise UsageError(f"unknown variant {cfg.variant!r}; one of {VARIANTS}")
    return cfg


def _write_resolved(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.txt").write_text(cfg.dump(), encoding="utf-8")
    print(f"resolved config -> {out_dir / 'resolved_config.txt'}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, {
        "seed": args.seed,
        "height": None if args.size is None else args.size[1],
        "width": None if args.size is None else args.size[0],
        "noise_std": args.noise,
    })
    out_dir = Path(args.out)
    scheme = scheme_by_name(args.scheme)
    counts = (args.per_level if args.counts is None
              else [int(c) for c in args.counts.split(",")])
    synth = cfg.synth_config()
    manifest = generate_corpus(synth, counts, scheme, out_dir)
    write_synth_config(synth, out_dir / "synth_config.txt")
    _write_resolved(cfg, out_dir)
    samples = load_corpus(manifest)
    per_level = {}
    for s in samples:
        lvl = s.general_level if scheme.kind == "general" else s.fine_level
        per_level[lvl] = per_level.get(lvl, 0) + 1
    for lvl in sorted(per_level):
        print(f"level {lvl}: {per_level[lvl]} samples")
    print(f"manifest -> {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "loss_ratio": args.loss_ratio,
        "variant": args.variant,
        "holdout_frac": args.holdout_frac,
    })
    samples = load_corpus(Path(args.data) / "manifest.csv")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out_dir)
    if args.all_data:
        train_samples = samples
    else:
        train_idx, _ = holdout_split(len(samples), cfg.holdout_frac, cfg.seed)
        train_samples = [samples[i] for i in train_idx]
    model = SeverityNet(cfg.network_config(), seed=cfg.seed)
    result = fit(model, train_samples, cfg.train_config(),
                 log_path=out_dir / "losses.csv")
    save_checkpoint(model, out_dir / "checkpoint.bin")
    last = result.history[-1]
    print(f"trained {cfg.epochs} epochs on {len(train_samples)} samples; "
          f"final losses general={last[1]:.4f} fine={last[2]:.4f} total={last[3]:.4f}")
    print(f"checkpoint -> {out_dir / 'checkpoint.bin'}")
    return 0


def _load_model(ckpt_path: Path, config_path: Path | None) -> tuple[SeverityNet, RunConfig]:
    ckpt_path = Path(ckpt_path)
    if config_path is None:
        config_path = ckpt_path.parent / "resolved_config.txt"
    if not Path(config_path).exists():
        raise FileNotFoundError(
            f"model config not found at {config_path}; pass --config")
    cfg = load_run_config(config_path, {})
    model = SeverityNet(cfg.network_config(), seed=cfg.seed)
    model.load_state(load_checkpoint(ckpt_path))
    model.set_mode("eval")
    return model, cfg


def _report_dict(model, split_samples, cfg):
    general, fine = evaluate(model, split_samples, (cfg.height, cfg.width))
    return {"general": general.to_dict(),
            "fine": None if fine is None else fine.to_dict()}, general, fine


def _write_roc_csv(report, path: Path) -> None:
    lines = ["level,fpr,tpr"]
    for lvl, curve in enumerate(report.roc, start=1):
        if curve is None:
            continue
        for fpr, tpr in curve.points:
            lines.append(f"{lvl},{fpr!r},{tpr!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_predictions_csv(samples, preds, path: Path) -> None:
    lines = ["index,angle_deg,true_general,pred_general,true_fine,pred_fine"]
    for i, s in enumerate(samples):
        pf = "" if preds.fine_pred is None else int(preds.fine_pred[i])
        tf = "" if preds.fine_pred is None else int(preds.fine_true[i])
        lines.append(f"{i},{s.angle_deg!r},{int(preds.general_true[i])},"
                     f"{int(preds.general_pred[i])},{tf},{pf}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.ckpt, args.config)
    samples = load_corpus(Path(args.data) / "manifest.csv")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out_dir)
    result: dict = {}
    if args.folds is not None:
        parts = fold_split(len(samples), args.folds, cfg.seed)
        fold_reports = []
        accs, maes = [], []
        for i, idx in enumerate(parts):
            split = [samples[j] for j in idx]
            d, general, _ = _report_dict(model, split, cfg)
            fold_reports.append({"fold": i, **d})
            accs.append(general.acc)
            maes.append(general.mae)
        result["folds"] = fold_reports
        result["average"] = {"general_acc": float(np.mean(accs)),
                             "general_mae": float(np.mean(maes))}
        pooled = samples
    else:
        train_idx, hold_idx = holdout_split(len(samples), cfg.holdout_frac, cfg.seed)
        train_part = [samples[i] for i in train_idx]
        hold_part = [samples[i] for i in hold_idx]
        d_train, _, _ = _report_dict(model, train_part, cfg)
        d_hold, _, _ = _report_dict(model, hold_part, cfg)
        result["train"] = d_train
        result["holdout"] = d_hold
        pooled = hold_part
    preds = predict(model, pooled, (cfg.height, cfg.width))
    general = compute_report(preds.general_true, preds.general_pred,
                             model.cfg.general_levels, preds.general_scores)
    general.cm.to_csv(out_dir / "confusion_general.csv")
    _write_roc_csv(general, out_dir / "roc_general.csv")
    if preds.fine_pred is not None:
        fine = compute_report(preds.fine_true, preds.fine_pred,
                              model.cfg.fine_levels, preds.fine_scores)
        fine.cm.to_csv(out_dir / "confusion_fine.csv")
        _write_roc_csv(fine, out_dir / "roc_fine.csv")
    _write_predictions_csv(pooled, preds, out_dir / "predictions.csv")
    (out_dir / "metrics.json").write_text(json.dumps(result, indent=2) + "\n",
                                          encoding="utf-8")
    print(f"metrics -> {out_dir / 'metrics.json'}")
    return 0


def cmd_explain(args) -> int:
    model, cfg = _load_model(args.ckpt, args.config)
    image_path = Path(args.image)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    image = load_image(image_path)
    if args.bbox is not None:
        x, y, w, h = (int(v) for v in args.bbox.split(","))
        sample = Sample(image, 0.0, (x, y, w, h), 1, 1)
        image = crop_bbox(sample, (cfg.height, cfg.width))
    else:
        image = bilinear_resize(image, cfg.height, cfg.width)
    heat = gradcam(model, image, target_layer=args.layer)
    overlay(heat, image, args.out, alpha=args.alpha)
    out = model.forward(image[None])
    fine_msg = "" if out.fine is None else f", fine level {int(out.fine.rhat[0])}"
    print(f"decoded general level {int(out.general.rhat[0])}{fine_msg}")
    print(f"overlay -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinegrade",
        description="Scoliosis severity grading: synthetic corpus, training, "
                    "evaluation, Grad-CAM explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def wh(text):
        w, h = text.lower().split("x")
        return (int(w), int(h))

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-level", type=int, default=3)
    p.add_argument("--counts", help="comma-separated per-level counts")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=wh, metavar="WxH")
    p.add_argument("--noise", type=float)
    p.add_argument("--scheme", choices=("general", "fine"), default="general")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss-ratio", help="general:fine, e.g. 2:1 (normalized)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--holdout-frac", type=float)
    p.add_argument("--all-data", action="store_true",
                   help="train on the full corpus (no holdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--folds", type=int)
    group.add_argument("--holdout", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write a Grad-CAM overlay for an image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--layer", default="matching_general")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--bbox", help="x,y,w,h crop applied before resizing")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
