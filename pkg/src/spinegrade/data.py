"""Severity level schemes and the synthetic back-image corpus.

Angle binning
    The general scheme has four levels (upper-inclusive bins): normal
    [0, 10], minor (10, 20], moderate (20, 45], severe (45, inf).  The
    fine-grained scheme has ten: nine 5-degree bins covering (0, 45] plus one
    bin for everything above 45.  Grouping fine levels (1-2, 3-4, 5-9, 10)
    reproduces the general scheme exactly.

Synthetic images
    Real clinical photographs cannot ship with the code, so the corpus is a
    parametric renderer: a grayscale torso silhouette whose spine ridge is
    bent along a circular arc subtending the requested angle, with a shoulder
    tilt, a one-sided scapular bump, and a waist-crease shift that all grow
    linearly with the angle.  At angle zero (and zero noise) the image is
    exactly mirror-symmetric about the vertical midline; asymmetry increases
    monotonically with the angle.  Generation is a pure function of
    (config, angle, sample seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

GENERAL_BOUNDARIES = (10.0, 20.0, 45.0)
FINE_BIN_WIDTH = 5.0
FINE_CUTOFF = 45.0


def general_level(angle_deg: float) -> int:
    """Four-way severity level of a Cobb angle in degrees."""
    if angle_deg < 0:
        raise ValueError(f"angle must be non-negative, got {angle_deg}")
    for level, upper in enumerate(GENERAL_BOUNDARIES, start=1):
        if angle_deg <= upper:
            return level
    return 4


def fine_level(angle_deg: float) -> int:
    """Ten-way severity level: nine 5-degree bins, then one open-ended bin."""
    if angle_deg < 0:
        raise ValueError(f"angle must be non-negative, got {angle_deg}")
    if angle_deg > FINE_CUTOFF:
        return 10
    return min(9, max(1, math.ceil(angle_deg / FINE_BIN_WIDTH)))


def fine_to_general(level: int) -> int:
    """Group fine levels (1-2, 3-4, 5-9, 10) into the general scheme."""
    if not 1 <= level <= 10:
        raise ValueError(f"fine level {level} outside [1, 10]")
    if level <= 2:
        return 1
    if level <= 4:
        return 2
    if level <= 9:
        return 3
    return 4


@dataclass(frozen=True)
class LevelScheme:
    kind: str
    levels: int

    def level_of(self, angle_deg: float) -> int:
        return general_level(angle_deg) if self.kind == "general" else fine_level(angle_deg)

    def bins(self, max_angle: float) -> list[tuple[float, float]]:
        """(lo, hi] sampling range per level; the top bin is capped at
        ``max_angle``."""
        if self.kind == "general":
            edges = (0.0,) + GENERAL_BOUNDARIES + (max_angle,)
        else:
            edges = tuple(i * FINE_BIN_WIDTH for i in range(10)) + (max_angle,)
        if max_angle <= edges[-2]:
            raise ValueError(f"max_angle {max_angle} must exceed {edges[-2]}")
        return list(zip(edges[:-1], edges[1:]))


GENERAL_SCHEME = LevelScheme("general", 4)
FINE_SCHEME = LevelScheme("fine", 10)


def scheme_by_name(name: str) -> LevelScheme:
    if name == "general":
        return GENERAL_SCHEME
    if name == "fine":
        return FINE_SCHEME
    raise ValueError(f"unknown level scheme {name!r}")


# ---------------------------------------------------------------------------
# synthetic torso rendering

@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    bend_scale: float = 2.2        # multiplies the arc sagitta (pixels)
    tilt_per_deg: float = 0.0060   # shoulder-line slope per degree
    bump_per_deg: float = 0.0070   # scapular bump intensity per degree
    waist_shift_per_deg: float = 0.10  # waist crease shift, pixels per degree
    # per-sample anatomy variation: all symmetric in x, so it never leaks
    # severity information and never breaks the angle-0 mirror symmetry
    width_jitter: float = 0.08
    intensity_jitter: float = 0.15
    brightness_jitter: float = 0.10
    band_shift_px: float = 1.5
    noise_std: float = 0.02
    max_angle: float = 80.0
    seed: int = 0


@dataclass(frozen=True)
class BodyShape:
    """Per-sample symmetric anatomy draw."""
    width_scale: float = 1.0
    intensity_scale: float = 1.0
    base_gain: float = 1.0
    shoulder_shift: float = 0.0
    waist_shift: float = 0.0


def draw_body_shape(cfg: SynthConfig, rng: np.random.Generator) -> BodyShape:
    return BodyShape(
        width_scale=1.0 + rng.uniform(-cfg.width_jitter, cfg.width_jitter),
        intensity_scale=1.0 + rng.uniform(-cfg.intensity_jitter,
                                          cfg.intensity_jitter),
        base_gain=1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter),
        shoulder_shift=rng.uniform(-cfg.band_shift_px, cfg.band_shift_px),
        waist_shift=rng.uniform(-cfg.band_shift_px, cfg.band_shift_px))


@dataclass
class Sample:
    image: np.ndarray          # (1, h, w) float64 in [0, 1]
    angle_deg: float
    bbox: tuple[int, int, int, int]  # (x, y, w, h)
    general_level: int
    fine_level: int


def _arc_offset(y: np.ndarray, y0: float, y1: float, angle_deg: float) -> np.ndarray:
    """Lateral offset of a circular arc subtending ``angle_deg`` over the
    vertical chord [y0, y1]; zero at the chord ends, sagitta at the middle."""
    if angle_deg == 0.0:
        return np.zeros_like(y)
    theta = math.radians(angle_deg)
    chord = y1 - y0
    radius = chord / (2.0 * math.sin(theta / 2.0))
    mid = 0.5 * (y0 + y1)
    inside = np.clip(radius**2 - (y - mid) ** 2, 0.0, None)
    off = np.sqrt(inside) - radius * math.cos(theta / 2.0)
    off[(y < y0) | (y > y1)] = 0.0
    return np.clip(off, 0.0, None)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def render_torso(angle_deg: float, cfg: SynthConfig,
                 body: BodyShape = BodyShape()) -> np.ndarray:
    """Noise-free torso image, (h, w) float64 in [0, 1]."""
    h, w = cfg.height, cfg.width
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :] - (w - 1) / 2.0

    y_top, y_bot = 0.10 * h, 0.95 * h
    spine0, spine1 = 0.16 * h, 0.90 * h
    delta = cfg.bend_scale * _arc_offset(ys, spine0, spine1, angle_deg)

    # torso silhouette: half-width profile with soft edges
    ctl_y = np.array([0.10, 0.18, 0.30, 0.55, 0.70, 0.88, 0.95]) * h
    ctl_hw = np.array([0.30, 0.78, 0.82, 0.60, 0.52, 0.68, 0.62]) * (w / 2.0)
    halfwidth = body.width_scale * np.interp(ys[:, 0], ctl_y, ctl_hw)[:, None]
    vert = _sigmoid((ys - y_top) / 1.5) * _sigmoid((y_bot - ys) / 1.5)
    center = 0.5 * delta
    img = 0.50 * body.base_gain * _sigmoid(
        (halfwidth - np.abs(xs - center)) / 1.5) * vert

    gain = body.intensity_scale

    # spine ridge along the bent arc
    spine_win = _sigmoid((ys - spine0) / 1.2) * _sigmoid((spine1 - ys) / 1.2)
    img += 0.22 * gain * np.exp(-((xs - delta) ** 2) / (2.0 * 1.3**2)) * spine_win

    # shoulder band, tilted proportionally to the angle
    tilt = cfg.tilt_per_deg * angle_deg
    shoulder_y = 0.20 * h + body.shoulder_shift + tilt * xs
    band = np.exp(-((ys - shoulder_y) ** 2) / (2.0 * 2.2**2))
    band *= _sigmoid((0.80 * body.width_scale * (w / 2.0) - np.abs(xs)) / 2.0)
    img += 0.20 * gain * band

    # one-sided scapular bump
    bump_amp = cfg.bump_per_deg * angle_deg
    if bump_amp != 0.0:
        xb, yb = 0.25 * (w / 2.0), 0.35 * h
        img += bump_amp * gain * np.exp(-((xs - xb) ** 2 / (2.0 * 4.5**2)
                                          + (ys - yb) ** 2 / (2.0 * 5.5**2)))

    # waist crease, shifted laterally with severity
    shift = cfg.waist_shift_per_deg * angle_deg
    img -= 0.12 * gain * (np.exp(-((xs - shift) ** 2) / (2.0 * 7.0**2))
                          * np.exp(-((ys - (0.68 * h + body.waist_shift)) ** 2)
                                   / (2.0 * 3.5**2)))

    return np.clip(img, 0.0, 1.0)


def default_bbox(cfg: SynthConfig) -> tuple[int, int, int, int]:
    x0 = round(0.04 * cfg.width)
    y0 = round(0.06 * cfg.height)
    x1 = cfg.width - x0
    y1 = round(0.97 * cfg.height)
    return (x0, y0, x1 - x0, y1 - y0)


def synth_back(angle_deg: float, cfg: SynthConfig, sample_seed: int = 0) -> Sample:
    """Render one labeled sample; pure function of (cfg, angle, seed).

    The body-shape draw happens before the pixel-noise draw, so the anatomy
    of sample ``i`` is identical across angles and noise settings.
    """
    if not 0.0 <= angle_deg < 180.0:
        raise ValueError(f"angle {angle_deg} outside [0, 180)")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, sample_seed)))
    img = render_torso(angle_deg, cfg, draw_body_shape(cfg, rng))
    if cfg.noise_std > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_std, img.shape), 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0  # snap to the 8-bit grid PNGs can hold
    return Sample(img[None], float(angle_deg), default_bbox(cfg),
                  general_level(angle_deg), fine_level(angle_deg))


# ---------------------------------------------------------------------------
# corpus generation and manifest I/O

MANIFEST_HEADER = ["path", "angle_deg", "bbox_x", "bbox_y", "bbox_w", "bbox_h"]


def _level_counts(n_per_level, levels: int) -> list[int]:
    if isinstance(n_per_level, int):
        if n_per_level < 1:
            raise ValueError("n_per_level must be >= 1")
        return [n_per_level] * levels
    counts = list(n_per_level)
    if len(counts) != levels or any(c < 1 for c in counts):
        raise ValueError(f"need {levels} positive per-level counts, got {counts}")
    return counts


def build_corpus(cfg: SynthConfig, n_per_level, scheme: LevelScheme) -> list[Sample]:
    """In-memory corpus with exact per-level counts; angles drawn uniformly
    within each level's bin.  Sample i is independent of all others (its rng
    derives from (cfg.seed, i)), so generation order never matters."""
    counts = _level_counts(n_per_level, scheme.levels)
    bins = scheme.bins(cfg.max_angle)
    samples = []
    index = 0
    for (lo, hi), count in zip(bins, counts):
        for _ in range(count):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
            angle = hi - rng.random() * (hi - lo)  # lies in (lo, hi]
            samples.append(synth_back(angle, cfg, sample_seed=index))
            index += 1
    return samples


def save_image(image: np.ndarray, path: Path) -> None:
    arr = np.round(image[0] * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return (arr / 255.0)[None]


def write_manifest(samples: Sequence[Sample], paths: Sequence[str],
                   manifest_path: Path) -> None:
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s, p in zip(samples, paths):
            writer.writerow([p, repr(s.angle_deg), *s.bbox])


def generate_corpus(cfg: SynthConfig, n_per_level, scheme: LevelScheme,
                    out_dir: Path) -> Path:
    """Write images plus manifest.csv under ``out_dir``; returns the manifest
    path."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {images_dir}: {exc}") from exc
    samples = build_corpus(cfg, n_per_level, scheme)
    rel_paths = []
    for i, s in enumerate(samples):
        rel = f"images/sample_{i:05d}.png"
        try:
            save_image(s.image, out_dir / rel)
        except OSError as exc:
            raise OSError(f"cannot write {out_dir / rel}: {exc}") from exc
        rel_paths.append(rel)
    manifest = out_dir / "manifest.csv"
    write_manifest(samples, rel_paths, manifest)
    return manifest


def load_corpus(manifest_path: Path) -> list[Sample]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples = []
    with open(manifest_path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise ValueError(f"bad manifest header in {manifest_path}: {header}")
        for row in reader:
            path, angle_s, bx, by, bw, bh = row
            angle = float(angle_s)
            samples.append(Sample(load_image(root / path), angle,
                                  (int(bx), int(by), int(bw), int(bh)),
                                  general_level(angle), fine_level(angle)))
    return samples


# ---------------------------------------------------------------------------
# cropping, resizing, augmentation

def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resampling (half-pixel centers, edge clamped)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(int)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :]
    out = np.empty((c, out_h, out_w), dtype=image.dtype)
    for ch in range(c):
        plane = image[ch]
        top = plane[np.ix_(y0, x0)] * (1 - fx) + plane[np.ix_(y0, x1)] * fx
        bottom = plane[np.ix_(y1, x0)] * (1 - fx) + plane[np.ix_(y1, x1)] * fx
        out[ch] = top * (1 - fy) + bottom * fy
    return out


def crop_bbox(sample: Sample, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Bounding-box crop, bilinearly resized to the network input size."""
    x, y, bw, bh = sample.bbox
    _, h, w = sample.image.shape
    if x < 0 or y < 0 or bw <= 0 or bh <= 0 or x + bw > w or y + bh > h:
        raise ValueError(f"bbox {sample.bbox} outside image {w}x{h}")
    crop = sample.image[:, y:y + bh, x:x + bw]
    if out_size is None:
        out_size = (h, w)
    return bilinear_resize(crop, out_size[0], out_size[1])


@dataclass(frozen=True)
class AugmentPolicy:
    """Label-preserving training augmentations; zero magnitudes disable each."""
    flip_prob: float = 0.5
    crop_frac: float = 0.05     # random clipping: up to this fraction per edge
    scale_range: float = 0.05   # random rescale in [1-s, 1+s]
    brightness: float = 0.05
    contrast: float = 0.05

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        if not 0 <= self.crop_frac < 0.5:
            raise ValueError("crop_frac must be in [0, 0.5)")
        for name in ("scale_range", "brightness", "contrast"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


IDENTITY_POLICY = AugmentPolicy(0.0, 0.0, 0.0, 0.0, 0.0)


def _clamp_bbox(bbox, w, h):
    x, y, bw, bh = bbox
    x = min(max(x, 0), w - 1)
    y = min(max(y, 0), h - 1)
    bw = max(1, min(bw, w - x))
    bh = max(1, min(bh, h - y))
    return (x, y, bw, bh)


def augment(sample: Sample, rng: np.random.Generator,
            policy: AugmentPolicy = AugmentPolicy()) -> Sample:
    """Random flip / rescale / clip / photometric jitter.

    Every transform preserves the angle and both level labels (mirroring a
    back does not change its curvature severity); pixel values are clamped
    back to [0, 1].
    """
    img = sample.image
    bbox = sample.bbox
    _, h, w = img.shape

    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        img = np.ascontiguousarray(img[:, :, ::-1])
        x, y, bw, bh = bbox
        bbox = (w - x - bw, y, bw, bh)

    if policy.scale_range > 0:
        f = 1.0 + rng.uniform(-policy.scale_range, policy.scale_range)
        nh, nw = max(8, round(h * f)), max(8, round(w * f))
        img = bilinear_resize(img, nh, nw)
        x, y, bw, bh = bbox
        bbox = _clamp_bbox((round(x * nw / w), round(y * nh / h),
                            round(bw * nw / w), round(bh * nh / h)), nw, nh)
        h, w = nh, nw

    if policy.crop_frac > 0:
        mx = int(policy.crop_frac * w)
        my = int(policy.crop_frac * h)
        left = rng.integers(0, mx + 1)
        right = w - rng.integers(0, mx + 1)
        top = rng.integers(0, my + 1)
        bottom = h - rng.integers(0, my + 1)
        img = img[:, top:bottom, left:right]
        x, y, bw, bh = bbox
        bbox = _clamp_bbox((x - left, y - top, bw, bh), right - left, bottom - top)

    if policy.contrast > 0:
        gain = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
        img = (img - 0.5) * gain + 0.5
    if policy.brightness > 0:
        img = img + rng.uniform(-policy.brightness, policy.brightness)
    if policy.contrast > 0 or policy.brightness > 0:
        img = np.clip(img, 0.0, 1.0)

    return replace(sample, image=np.ascontiguousarray(img), bbox=bbox)


# ---------------------------------------------------------------------------
# generator config as a flat key=value file

def write_synth_config(cfg: SynthConfig, path: Path) -> None:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(SynthConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_synth_config(path: Path) -> SynthConfig:
    known = {f.name: f.type for f in fields(SynthConfig)}
    kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kwargs[key] = (int(value) if key in ("height", "width", "seed")
                       else float(value))
    return SynthConfig(**kwargs)
