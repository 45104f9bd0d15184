"""Corpora: MVTec-layout ingestion, procedural textures with injected defects,
pretext classification sets, and seeded batch iteration.

Images are float32 arrays in [0, 1] shaped (N, 3, H, W); masks are uint8
(N, H, W) with 1 on defect pixels (all zero for normal items). Generated
pixel values are quantized to multiples of 1/255 so a corpus survives a PNG
round trip bit-exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter
from skimage import draw

from .errors import ConfigError, IngestionError, InputError

NORMAL = "good"
DEFECT_KINDS = ("scratch-line", "blob", "color-shift", "crack-polyline")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class LabeledCorpus:
    images: np.ndarray
    labels: list[str]
    masks: np.ndarray
    split: str = "train"
    category: str = "synthetic"
    targets: np.ndarray | None = None  # integer class ids (pretext corpora)
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.labels)
        if self.images.shape[0] != n or self.masks.shape[0] != n:
            raise InputError("images, labels and masks disagree in length")
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise InputError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.masks.shape[1:] != self.images.shape[2:]:
            raise InputError("mask dims differ from image dims")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_defect(self) -> np.ndarray:
        return np.array([lab != NORMAL for lab in self.labels], dtype=bool)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[2])


def assert_normal_only(corpus: LabeledCorpus) -> None:
    bad = [i for i, lab in enumerate(corpus.labels) if lab != NORMAL]
    if bad:
        raise InputError(f"training corpus contains {len(bad)} non-normal items "
                         f"(first: index {bad[0]}, label {corpus.labels[bad[0]]!r})")


def _quantize(img: np.ndarray) -> np.ndarray:
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return u8.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

@dataclass
class TextureSpec:
    kind: str = "stripes"  # stripes | noise | tiles
    period: tuple[float, float] = (8.0, 8.0)
    angle_deg: float = 30.0
    angle_jitter_deg: float = 0.0
    color_a: tuple[float, float, float] = (0.22, 0.30, 0.42)
    color_b: tuple[float, float, float] = (0.70, 0.66, 0.55)
    color_jitter: float = 0.03
    grain: float = 0.025
    smooth_sigma: float = 3.0


def _grid(size: int):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def render_texture(spec: TextureSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    if spec.kind == "stripes":
        theta = math.radians(spec.angle_deg + rng.uniform(-spec.angle_jitter_deg, spec.angle_jitter_deg))
        period = rng.uniform(*spec.period)
        phase = rng.uniform(0, 2 * math.pi)
        s = 0.5 + 0.5 * np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period + phase)
    elif spec.kind == "tiles":
        period = rng.uniform(*spec.period)
        ox, oy = rng.uniform(0, period, size=2)
        u = ((xx + ox) % period) / period
        v = ((yy + oy) % period) / period
        s = ((np.abs(u - 0.5) < 0.3) & (np.abs(v - 0.5) < 0.3)).astype(np.float64)
        s = gaussian_filter(s, 0.7)
    elif spec.kind == "noise":
        s = 0.5 + 0.25 * _smooth_noise(rng, size, spec.smooth_sigma)
        s = np.clip(s, 0, 1)
    else:
        raise ConfigError(f"unknown texture kind {spec.kind!r}")
    a = np.asarray(spec.color_a) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    b = np.asarray(spec.color_b) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    img = a[:, None, None] * (1 - s) + b[:, None, None] * s
    img += spec.grain * rng.standard_normal((3, size, size))
    return _quantize(img)


# ---------------------------------------------------------------------------
# defects
# ---------------------------------------------------------------------------

@dataclass
class DefectSpec:
    kinds: tuple[str, ...] = DEFECT_KINDS
    size: tuple[int, int] = (8, 16)        # extent in pixels
    intensity: tuple[float, float] = (0.25, 0.5)
    count: tuple[int, int] = (1, 1)        # defects per image, inclusive
    seed: int = 0

    def validate(self, image_size: int) -> None:
        unknown = set(self.kinds) - set(DEFECT_KINDS)
        if not self.kinds or unknown:
            raise ConfigError(f"unknown defect kinds {sorted(unknown)}")
        lo, hi = self.size
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad defect size range {self.size}")
        if hi >= image_size:
            raise ConfigError(f"defect size {hi} does not fit a {image_size}px image")
        if self.count[0] < 1 or self.count[1] < self.count[0]:
            raise ConfigError(f"bad defect count range {self.count}")


def _thick_line(r0, c0, r1, c1, width: int, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    for dr in range(width):
        for dc in range(width):
            rr, cc = draw.line(int(r0) + dr, int(c0) + dc, int(r1) + dr, int(c1) + dc)
            ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            m[rr[ok], cc[ok]] = True
    return m


def _defect_region(kind: str, spec: DefectSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.size
    extent = rng.integers(lo, hi + 1)
    margin = extent // 2 + 2
    r, c = rng.integers(margin, size - margin, size=2)
    if kind == "scratch-line":
        ang = rng.uniform(0, math.pi)
        dr, dc = 0.5 * extent * math.sin(ang), 0.5 * extent * math.cos(ang)
        return _thick_line(r - dr, c - dc, r + dr, c + dc, int(rng.integers(1, 3)), size)
    if kind == "crack-polyline":
        m = np.zeros((size, size), dtype=bool)
        n_seg = int(rng.integers(3, 6))
        step = extent / n_seg
        ang = rng.uniform(0, 2 * math.pi)
        pr, pc = r - 0.5 * extent * math.sin(ang), c - 0.5 * extent * math.cos(ang)
        for _ in range(n_seg):
            ang += rng.uniform(-0.8, 0.8)
            nr, nc = pr + step * math.sin(ang), pc + step * math.cos(ang)
            m |= _thick_line(pr, pc, nr, nc, 1, size)
            pr, pc = nr, nc
        return m
    m = np.zeros((size, size), dtype=bool)
    ra = max(1.5, extent / 2)
    rb = max(1.5, ra * rng.uniform(0.5, 1.0))
    rr, cc = draw.ellipse(r, c, ra, rb, shape=(size, size), rotation=rng.uniform(0, math.pi))
    m[rr, cc] = True
    return m


def _apply_defect(img: np.ndarray, region: np.ndarray, kind: str, spec: DefectSpec,
                  rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    amt = rng.uniform(*spec.intensity)
    px = out[:, region]
    if kind == "scratch-line":
        sign = 1.0 if px.mean() < 0.5 else -1.0
        px = px + sign * amt
    elif kind == "crack-polyline":
        px = px * (1 - amt) - 0.5 * amt
    elif kind == "blob":
        color = rng.uniform(0, 1, 3)
        px = (1 - amt) * px + amt * 2.0 * color[:, None] - amt * px.mean(axis=1, keepdims=True)
    elif kind == "color-shift":
        px = px[[1, 2, 0]] + amt * np.array([0.6, -0.6, 0.3])[:, None]
    out[:, region] = px
    out = _quantize(out)
    # every pixel in the region must actually change (mask == modified set)
    same = np.all(out == img, axis=0) & region
    if same.any():
        ch0 = out[0]
        ch0[same] = np.where(img[0][same] < 0.5, img[0][same] + 2 / 255, img[0][same] - 2 / 255)
        out = _quantize(out)
    return out


def inject_defects(img: np.ndarray, kind: str, spec: DefectSpec,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = img.shape[1]
    mask = np.zeros((size, size), dtype=bool)
    out = img
    for _ in range(int(rng.integers(spec.count[0], spec.count[1] + 1))):
        region = _defect_region(kind, spec, size, rng)
        out = _apply_defect(out, region, kind, spec, rng)
        mask |= region
    mask = np.any(out != img, axis=0)
    return out, mask.astype(np.uint8)


def gen_synthetic(n_train: int = 200, n_test_normal: int = 50, n_test_defect: int = 50,
                  texture: TextureSpec | None = None, defects: DefectSpec | None = None,
                  seed: int = 0, image_size: int = 64,
                  category: str = "synthetic") -> tuple[LabeledCorpus, LabeledCorpus]:
    """Generate a (train, test) pair: normal textures and textures with defects.

    Defect kinds cycle through ``defects.kinds``; the mask of each defect image
    is exactly the set of pixels that differ from its clean base.
    """
    if min(n_train, n_test_normal, n_test_defect) < 1:
        raise ConfigError("corpus counts must be >= 1")
    if image_size % 32:
        raise ConfigError(f"image size {image_size} is not divisible by 32")
    texture = texture or TextureSpec()
    defects = defects or DefectSpec(seed=seed)
    defects.validate(image_size)
    tex_rng, defect_rng = (np.random.default_rng(s) for s in
                           np.random.SeedSequence([seed, defects.seed]).spawn(2))
    size = image_size

    train = np.stack([render_texture(texture, size, tex_rng) for _ in range(n_train)])
    test_imgs = [render_texture(texture, size, tex_rng) for _ in range(n_test_normal)]
    labels = [NORMAL] * n_test_normal
    masks = [np.zeros((size, size), np.uint8) for _ in range(n_test_normal)]
    for i in range(n_test_defect):
        kind = defects.kinds[i % len(defects.kinds)]
        base = render_texture(texture, size, tex_rng)
        img, mask = inject_defects(base, kind, defects, defect_rng)
        test_imgs.append(img)
        labels.append(kind)
        masks.append(mask)
    train_c = LabeledCorpus(train, [NORMAL] * n_train, np.zeros((n_train, size, size), np.uint8),
                            "train", category)
    test_c = LabeledCorpus(np.stack(test_imgs), labels, np.stack(masks), "test", category)
    return train_c, test_c


# ---------------------------------------------------------------------------
# pretext
# ---------------------------------------------------------------------------

# (dark, light) base palette per texture family
_PALETTE = [
    ((0.20, 0.25, 0.50), (0.80, 0.80, 0.60)),
    ((0.50, 0.20, 0.20), (0.90, 0.70, 0.60)),
    ((0.15, 0.40, 0.20), (0.70, 0.90, 0.60)),
    ((0.10, 0.10, 0.10), (0.60, 0.60, 0.60)),
    ((0.40, 0.30, 0.10), (0.95, 0.85, 0.40)),
    ((0.30, 0.10, 0.40), (0.80, 0.60, 0.90)),
    ((0.35, 0.35, 0.35), (0.75, 0.75, 0.75)),
    ((0.10, 0.30, 0.40), (0.50, 0.80, 0.90)),
]
PRETEXT_FAMILIES = ("h-stripes", "v-stripes", "diag-stripes", "checker", "dots", "rings",
                    "blobs", "grain")


def _pretext_pattern(family: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    period = rng.uniform(6, 12)
    phase = rng.uniform(0, 2 * math.pi)
    if family == 0:
        return 0.5 + 0.5 * np.sin(2 * math.pi * yy / period + phase)
    if family == 1:
        return 0.5 + 0.5 * np.sin(2 * math.pi * xx / period + phase)
    if family == 2:
        sgn = rng.choice([-1.0, 1.0])
        return 0.5 + 0.5 * np.sin(2 * math.pi * (xx + sgn * yy) / (period * 1.41) + phase)
    if family == 3:
        ox, oy = rng.uniform(0, 2 * period, 2)
        return (((xx + ox) // period + (yy + oy) // period) % 2).astype(np.float64)
    if family == 4:
        ox, oy = rng.uniform(0, period, 2)
        d = np.hypot((xx + ox) % period - period / 2, (yy + oy) % period - period / 2)
        return (d < period * 0.25).astype(np.float64)
    if family == 5:
        cy, cx = rng.uniform(0, size, 2)
        return 0.5 + 0.5 * np.sin(2 * math.pi * np.hypot(yy - cy, xx - cx) / period + phase)
    if family == 6:
        return np.clip(0.5 + 0.3 * _smooth_noise(rng, size, 5.0), 0, 1)
    return np.clip(0.5 + 0.3 * _smooth_noise(rng, size, 0.8), 0, 1)


def gen_pretext(k_classes: int = 8, n_per_class: int = 50, seed: int = 0,
                image_size: int = 64) -> LabeledCorpus:
    """k procedural texture families (stripes, checkers, dots, rings, noise ...), balanced."""
    if not 2 <= k_classes <= len(PRETEXT_FAMILIES):
        raise ConfigError(f"k_classes must be in [2, {len(PRETEXT_FAMILIES)}]")
    rng = np.random.default_rng(seed)
    imgs, targets = [], []
    for i in range(n_per_class):
        for fam in range(k_classes):
            s = _pretext_pattern(fam, image_size, rng)
            dark, light = (np.asarray(c) + rng.uniform(-0.1, 0.1, 3) for c in _PALETTE[fam])
            img = dark[:, None, None] * (1 - s) + light[:, None, None] * s
            img += 0.02 * rng.standard_normal(img.shape)
            imgs.append(_quantize(img))
            targets.append(fam)
    n = len(imgs)
    return LabeledCorpus(np.stack(imgs), [NORMAL] * n,
                         np.zeros((n, image_size, image_size), np.uint8), "train", "pretext",
                         targets=np.asarray(targets, dtype=np.int64))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(corpus: LabeledCorpus, batch_size: int, seed: int, epoch: int = 0,
               shuffle: bool = True) -> Iterator[tuple[np.ndarray, torch.Tensor]]:
    """Yield (indices, image batch) pairs; order is a permutation seeded by (seed, epoch)."""
    if len(corpus) == 0:
        raise InputError("cannot iterate an empty corpus")
    if batch_size < 1:
        raise InputError("batch size must be >= 1")
    n = len(corpus)
    order = (np.random.default_rng([seed, epoch]).permutation(n) if shuffle
             else np.arange(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield idx, torch.from_numpy(np.ascontiguousarray(corpus.images[idx]))


# ---------------------------------------------------------------------------
# MVTec directory layout
# ---------------------------------------------------------------------------

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)


def export_mvtec_layout(root: str | Path, train: LabeledCorpus, test: LabeledCorpus) -> Path:
    """Write ``root/<category>/{train/good, test/<label>, ground_truth/<label>}``."""
    base = Path(root) / train.category
    (base / "train" / NORMAL).mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(train.images):
        Image.fromarray(_to_u8(img)).save(base / "train" / NORMAL / f"{i:03d}.png")
    counters: dict[str, int] = {}
    for img, label, mask in zip(test.images, test.labels, test.masks):
        j = counters.get(label, 0)
        counters[label] = j + 1
        d = base / "test" / label
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_u8(img)).save(d / f"{j:03d}.png")
        if label != NORMAL:
            g = base / "ground_truth" / label
            g.mkdir(parents=True, exist_ok=True)
            Image.fromarray(mask.astype(np.uint8) * 255).save(g / f"{j:03d}_mask.png")
    return base


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS) if d.is_dir() else []


def _read_image(path: Path, size: int) -> np.ndarray:
    try:
        im = Image.open(path).convert("RGB")
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def read_image(path: str | Path, size: int) -> np.ndarray:
    return _read_image(Path(path), size)


def _read_mask(path: Path, size: int) -> np.ndarray:
    try:
        im = Image.open(path).convert("L")
    except Exception as exc:
        raise IngestionError(f"cannot decode mask {path}: {exc}") from exc
    if im.size != (size, size):
        im = im.resize((size, size), Image.NEAREST)
    return (np.asarray(im, dtype=np.float32) / 255.0 >= 0.5).astype(np.uint8)


def load_mvtec_layout(root: str | Path, category: str,
                      image_size: int = 256) -> tuple[LabeledCorpus, LabeledCorpus]:
    base = Path(root) / category
    train_files = _list_images(base / "train" / NORMAL)
    if not train_files:
        raise IngestionError(f"empty train split: no images under {base / 'train' / NORMAL}")
    # anything else under train/ is kept with its folder label so callers can reject it
    train_labels = [NORMAL] * len(train_files)
    train_dir = base / "train"
    for d in sorted(p for p in train_dir.iterdir() if p.is_dir() and p.name != NORMAL):
        extra = _list_images(d)
        train_files += extra
        train_labels += [d.name] * len(extra)
    train_imgs = np.stack([_read_image(p, image_size) for p in train_files])
    train = LabeledCorpus(train_imgs, train_labels,
                          np.zeros((len(train_files), image_size, image_size), np.uint8),
                          "train", category, names=[str(p) for p in train_files])

    imgs, labels, masks, names = [], [], [], []
    test_dir = base / "test"
    labels_found = sorted(d.name for d in test_dir.iterdir() if d.is_dir()) if test_dir.is_dir() else []
    # normal items first, then defect types alphabetically
    for label in sorted(labels_found, key=lambda s: (s != NORMAL, s)):
        for p in _list_images(test_dir / label):
            imgs.append(_read_image(p, image_size))
            labels.append(label)
            names.append(str(p))
            if label == NORMAL:
                masks.append(np.zeros((image_size, image_size), np.uint8))
                continue
            gt = [base / "ground_truth" / label / f"{p.stem}_mask{ext}" for ext in IMAGE_EXTS]
            gt = [g for g in gt if g.exists()]
            if not gt:
                raise IngestionError(f"missing ground-truth mask for {p} "
                                     f"(expected {base / 'ground_truth' / label / (p.stem + '_mask.png')})")
            masks.append(_read_mask(gt[0], image_size))
    if not imgs:
        raise IngestionError(f"empty test split under {test_dir}")
    test = LabeledCorpus(np.stack(imgs), labels, np.stack(masks), "test", category, names=names)
    return train, test
