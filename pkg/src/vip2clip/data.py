"""Synthetic defect corpus and an MVTec-style directory loader.

On-disk layout, shared by the generator and the loader::

    <root>/<class>/test/good/<id>.png
    <root>/<class>/test/<defect_type>/<id>.png
    <root>/<class>/ground_truth/<defect_type>/<id>_mask.png

The generator writes one such tree per split under ``<out>/<split>/``.
Images are 8-bit grayscale; masks store {0, 255}.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from vip2clip import numerics
from vip2clip.errors import ConfigError, EmptyDataset, IoError, MissingMask, UnreadableImage

TEXTURES = ("grating", "checker", "noise")
DEFECTS = ("blob", "scratch", "patch")
SPLITS = ("train", "val", "test")


@dataclass
class LabeledSample:
    image: np.ndarray       # (h, w) float32 in [0, 1]
    mask: np.ndarray        # (h, w) float32 in {0, 1}
    label: int              # 1 = abnormal
    id: str
    cls: str = "synthetic"
    defect: str = "good"


@dataclass(frozen=True)
class SynthConfig:
    size: int = 128
    textures: tuple = TEXTURES
    defects: tuple = DEFECTS
    delta: float = 0.35
    area_min: int = 64
    area_max: int = 1200
    max_defects: int = 3
    noise: float = 0.02
    counts: tuple = (("train", 400), ("val", 50), ("test", 100))
    anomaly_fraction: float = 0.5
    seed: int = 42
    split_textures: tuple = ()      # optional (split, textures) overrides

    def __post_init__(self):
        if self.size < 8 or self.area_min < 1 or self.area_max < self.area_min:
            raise ConfigError(f"bad synthetic sizes: {self}")
        if self.area_max > self.size * self.size // 2:
            raise ConfigError("area_max must be at most half the image")
        if not 0 < self.anomaly_fraction < 1:
            raise ConfigError("anomaly_fraction must lie in (0, 1)")
        if not self.textures or set(self.textures) - set(TEXTURES):
            raise ConfigError(f"textures must be drawn from {TEXTURES}")
        if not self.defects or set(self.defects) - set(DEFECTS):
            raise ConfigError(f"defects must be drawn from {DEFECTS}")

    def textures_for(self, split: str) -> tuple:
        return dict(self.split_textures).get(split, self.textures)


# ---------------------------------------------------------------- textures


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def make_texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    y, x = _grid(size)
    if kind == "grating":
        period = rng.uniform(6, 16)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.2 * np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period + phase)
    elif kind == "checker":
        cell = rng.integers(6, 17)
        oy, ox = rng.integers(0, cell, size=2)
        lo, hi = 0.5 - rng.uniform(0.1, 0.2), 0.5 + rng.uniform(0.1, 0.2)
        img = np.where(((y + oy) // cell + (x + ox) // cell) % 2 == 0, lo, hi)
    elif kind == "noise":
        lattice = rng.uniform(0.3, 0.7, size=(9, 9))
        img = numerics.upsample_bilinear(lattice, size, size)
    else:
        raise ConfigError(f"unknown texture {kind!r}")
    return img


# ------------------------------------------------------------------ defects


def _defect_mask(kind: str, size: int, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    y, x = _grid(size)
    target = rng.uniform(cfg.area_min, cfg.area_max / cfg.max_defects)
    if kind == "blob":
        aspect = rng.uniform(0.5, 2.0)
        ry = np.sqrt(target * aspect / np.pi)
        rx = target / (np.pi * ry)
        cy, cx = rng.uniform(ry, size - ry), rng.uniform(rx, size - rx)
        return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
    if kind == "scratch":
        width = rng.uniform(2.0, 4.0)
        length = min(target / width, size * 0.8)
        theta = rng.uniform(0, np.pi)
        dy, dx = np.sin(theta) * length, np.cos(theta) * length
        y0 = rng.uniform(max(0, -dy), min(size, size - dy))
        x0 = rng.uniform(max(0, -dx), min(size, size - dx))
        t = np.clip(((y - y0) * dy + (x - x0) * dx) / (length * length), 0, 1)
        dist = np.hypot(y - (y0 + t * dy), x - (x0 + t * dx))
        return dist <= width / 2
    if kind == "patch":
        aspect = rng.uniform(0.5, 2.0)
        ph = max(2, int(round(np.sqrt(target * aspect))))
        pw = max(2, int(round(target / ph)))
        ph, pw = min(ph, size // 2), min(pw, size // 2)
        top, left = rng.integers(0, size - ph + 1), rng.integers(0, size - pw + 1)
        m = np.zeros((size, size), dtype=bool)
        m[top:top + ph, left:left + pw] = True
        return m
    raise ConfigError(f"unknown defect {kind!r}")


def _apply_defect(img, mask, kind, rng, cfg):
    sign = rng.choice([-1.0, 1.0])
    if kind == "patch":
        foreign = make_texture(rng.choice([t for t in TEXTURES if t != "checker"]), img.shape[0], rng)
        patch = 0.5 + 2.0 * (foreign - 0.5) + sign * cfg.delta
        return np.where(mask, patch, img)
    return np.where(mask, img + sign * cfg.delta, img)


def make_sample(texture: str, defect: str | None, rng: np.random.Generator, cfg: SynthConfig):
    """One image and its mask; ``defect=None`` yields a normal sample."""
    img = make_texture(texture, cfg.size, rng)
    mask = np.zeros((cfg.size, cfg.size), dtype=bool)
    if defect is not None:
        for _ in range(200):
            n = rng.integers(1, cfg.max_defects + 1)
            parts = [_defect_mask(defect, cfg.size, rng, cfg) for _ in range(n)]
            union = np.logical_or.reduce(parts)
            if cfg.area_min <= union.sum() <= cfg.area_max:
                break
        else:
            raise ConfigError(f"could not place a {defect} defect within area bounds")
        for part in parts:
            img = _apply_defect(img, part, defect, rng, cfg)
        mask = union
    img = img + cfg.noise * rng.standard_normal(img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255) / 255
    return img.astype(np.float32), mask.astype(np.float32)


def generate(cfg: SynthConfig) -> dict[str, list[LabeledSample]]:
    """Seeded in-memory corpus: per split, exactly round(n * anomaly_fraction) abnormal samples."""
    splits = {}
    root = np.random.SeedSequence(cfg.seed)
    for (split, n), child in zip(cfg.counts, root.spawn(len(cfg.counts))):
        rng = np.random.default_rng(child)
        n_abnormal = int(round(n * cfg.anomaly_fraction))
        labels = np.array([1] * n_abnormal + [0] * (n - n_abnormal))
        rng.shuffle(labels)
        textures = cfg.textures_for(split)
        samples = []
        for i, label in enumerate(labels):
            texture = textures[rng.integers(len(textures))]
            defect = cfg.defects[rng.integers(len(cfg.defects))] if label else None
            img, mask = make_sample(texture, defect, rng, cfg)
            samples.append(LabeledSample(img, mask, int(label), f"{split}_{i:04d}", texture, defect or "good"))
        splits[split] = samples
    return splits


# --------------------------------------------------------------------- I/O


def save_png(path, arr: np.ndarray) -> None:
    """Write a [0, 1] array as 8-bit grayscale (value = round(255 * x))."""
    data = np.round(np.clip(np.asarray(arr, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot read image {path}: {exc}") from exc


def write_split(samples: list[LabeledSample], root) -> None:
    root = Path(root)
    for s in samples:
        save_png(root / s.cls / "test" / s.defect / f"{s.id}.png", s.image)
        if s.label:
            save_png(root / s.cls / "ground_truth" / s.defect / f"{s.id}_mask.png", s.mask)


def generate_to_disk(cfg: SynthConfig, out) -> dict[str, list[LabeledSample]]:
    splits = generate(cfg)
    for name, samples in splits.items():
        write_split(samples, Path(out) / name)
    return splits


def _resize(arr: np.ndarray, size: int | None, resample) -> np.ndarray:
    if size is None or arr.shape == (size, size):
        return arr
    return np.asarray(Image.fromarray(arr).resize((size, size), resample=resample))


def load_mvtec_layout(root, size: int | None = None) -> list[LabeledSample]:
    """Load every ``<class>/test/<defect>/*.png`` under ``root``, sorted by path.

    Masks are resized nearest-neighbor so they stay binary.
    """
    root = Path(root)
    if not root.is_dir():
        raise IoError(f"dataset root {root} is not a directory")
    samples = []
    for path in sorted(root.glob("*/test/*/*.png")):
        cls, defect = path.parts[-4], path.parts[-2]
        img = _resize(read_png(path), size, Image.BILINEAR)
        if defect == "good":
            mask = np.zeros(img.shape, dtype=np.float32)
        else:
            mpath = root / cls / "ground_truth" / defect / f"{path.stem}_mask.png"
            if not mpath.exists():
                raise MissingMask(f"no mask for abnormal image {path} (expected {mpath})")
            mask = (_resize(read_png(mpath), size, Image.NEAREST) > 127).astype(np.float32)
        label = int(mask.any())
        samples.append(LabeledSample((img / 255.0).astype(np.float32), mask, label, path.stem, cls, defect))
    if not samples:
        raise EmptyDataset(f"no images found under {root}")
    return samples
