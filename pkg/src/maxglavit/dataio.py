"""Dataset layout scanning, image decoding, resampling and the synthetic disc dataset."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .layers import make_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
CLASSES = ("advanced", "early", "normal")
LABELS = {name: i for i, name in enumerate(CLASSES)}
IMAGE_SUFFIXES = (".png", ".ppm")

# Train / validation / test images per class.
HDV1_COUNTS = {
    "train": {"advanced": 228, "early": 141, "normal": 385},
    "validation": {"advanced": 98, "early": 61, "normal": 165},
    "test": {"advanced": 141, "early": 87, "normal": 236},
}


class DatasetError(ValueError):
    pass


class DecodeError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    files: dict = field(default_factory=dict)  # split -> class -> [Path]
    labels: dict = field(default_factory=lambda: dict(LABELS))

    def counts(self) -> dict:
        return {s: {c: len(v) for c, v in per.items()} for s, per in self.files.items()}

    def split_total(self, split: str) -> int:
        return sum(len(v) for v in self.files[split].values())

    def class_total(self, cls: str) -> int:
        return sum(len(self.files[s][cls]) for s in self.files)

    def total(self) -> int:
        return sum(self.split_total(s) for s in self.files)

    def items(self, split: str) -> list[tuple[Path, int]]:
        return [(p, self.labels[c]) for c in sorted(self.files[split]) for p in self.files[split][c]]

    def to_json(self) -> str:
        return json.dumps({
            "root": str(self.root),
            "labels": self.labels,
            "counts": self.counts(),
            "files": {s: {c: [str(p.relative_to(self.root)) for p in v] for c, v in per.items()}
                      for s, per in self.files.items()},
        }, indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"{'class':<10}" + "".join(f"{s:>12}" for s in self.files) + f"{'total':>8}"]
        for c in CLASSES:
            row = [len(self.files[s].get(c, [])) for s in self.files]
            lines.append(f"{c:<10}" + "".join(f"{n:>12}" for n in row) + f"{sum(row):>8}")
        totals = [self.split_total(s) for s in self.files]
        lines.append(f"{'Total':<10}" + "".join(f"{n:>12}" for n in totals) + f"{sum(totals):>8}")
        return "\n".join(lines)


def scan_dataset(root) -> DatasetManifest:
    """Index ``root/{train,validation,test}/{advanced,early,normal}/*`` deterministically."""
    root = Path(root)
    expected = "expected layout: root/{" + ",".join(SPLITS) + "}/{" + ",".join(CLASSES) + "}/*.png|*.ppm"
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist; {expected}")
    manifest = DatasetManifest(root)
    for split in SPLITS:
        sdir = root / split
        if not sdir.is_dir():
            raise DatasetError(f"missing split directory {sdir}; {expected}")
        for extra in sorted(p.name for p in sdir.iterdir() if p.is_dir() and p.name not in CLASSES):
            log.warning("ignoring unknown class directory %s", sdir / extra)
        per = {}
        for cls in CLASSES:
            cdir = sdir / cls
            if not cdir.is_dir():
                raise DatasetError(f"missing class directory {cdir}; {expected}")
            files = []
            for p in sorted(cdir.iterdir()):
                if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
                    files.append(p)
                elif p.is_file():
                    log.warning("skipping non-image file %s", p)
            if not files:
                raise DatasetError(f"class directory {cdir} contains no images")
            per[cls] = files
        manifest.files[split] = per
    return manifest


def verify_hdv1(manifest: DatasetManifest) -> list[str]:
    """Differences between the manifest counts and the HDV1 reference counts."""
    diffs = []
    counts = manifest.counts()
    for split, per in HDV1_COUNTS.items():
        for cls, want in per.items():
            got = counts.get(split, {}).get(cls, 0)
            if got != want:
                diffs.append(f"{split}/{cls}: expected {want}, found {got}")
    return diffs


# ---------------------------------------------------------------- images

def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``[C, H, W]`` at fractional coordinates; outside the image reads as 0."""
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(img.dtype)
    fx = (xs - x0).astype(img.dtype)
    out = np.zeros((c,) + ys.shape, dtype=img.dtype)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(inside, wy * wx, 0).astype(img.dtype) * vals
    return out


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Resize ``[C, H, W]`` to ``size x size`` with pixel-centre-aligned bilinear sampling."""
    c, h, w = img.shape
    if (h, w) == (size, size):
        return img
    ys = (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = (np.arange(size) + 0.5) * (w / size) - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return bilinear_sample(img, yy, xx)


def normalize(pixels01: np.ndarray, mean=0.5, std=0.5) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return ((pixels01 - mean) / std).astype(np.float32)


def denormalize(x: np.ndarray, mean=0.5, std=0.5) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return x * std + mean


@dataclass
class ImageSample:
    pixels: np.ndarray  # [3, H, W] float32, normalised
    label: int | None
    path: Path | None


def decode_image(path, target_size: int = 224, label: int | None = None, mean=0.5, std=0.5) -> ImageSample:
    """Decode an 8-bit RGB PNG or binary PPM into a normalised ``[3, S, S]`` array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise DecodeError(f"{path}: unsupported format {im.format}")
            if im.mode != "RGB":
                raise DecodeError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            im.load()
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(f"{path}: cannot decode ({exc})") from exc
    img = arr.transpose(2, 0, 1).astype(np.float32) / 255.0
    img = resize_bilinear(img, target_size)
    return ImageSample(normalize(img, mean, std), label, path)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write ``[H, W, 3]`` uint8 as binary PPM (P6, maxval 255)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def load_split(manifest: DatasetManifest, split: str, size: int) -> tuple[np.ndarray, np.ndarray]:
    items = manifest.items(split)
    x = np.stack([decode_image(p, size).pixels for p, _ in items]) if items else np.zeros((0, 3, size, size))
    y = np.array([lbl for _, lbl in items], dtype=np.int64)
    return x.astype(np.float32), y


# ---------------------------------------------------------------- synthetic data

DISC_RADII = (6, 12, 18)


def _quadrant_centre(k: int, size: int) -> tuple[float, float]:
    q = k % 4
    return (size / 4 if q < 2 else 3 * size / 4), (size / 4 if q % 2 == 0 else 3 * size / 4)


def synthetic_template(k: int, size: int = 64) -> np.ndarray:
    """Noise-free ``[3, S, S]`` image of class ``k`` in [0, 1]: a bright disc on black."""
    cy, cx = _quadrant_centre(k, size)
    r = DISC_RADII[k % len(DISC_RADII)] * size / 64
    yy, xx = np.mgrid[0:size, 0:size]
    disc = ((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r).astype(np.float32)
    return np.repeat(disc[None], 3, axis=0)


@dataclass
class InMemoryDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    class_names: tuple = CLASSES

    @property
    def input_size(self) -> int:
        return self.x_train.shape[-1]


def synthetic_images(seed: int, per_class: int, size: int = 64, classes: int = 3, noise: float = 0.1,
                     offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Class ``k`` = disc of radius ``DISC_RADII[k]`` in quadrant ``k`` plus Gaussian noise.

    Sample ``i`` draws its noise from the stream ``(seed, offset + i)``.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    xs, ys = [], []
    for i in range(per_class * classes):
        k = i % classes
        img = synthetic_template(k, size)
        if noise:
            img = img + noise * make_rng(seed, offset + i).standard_normal(img.shape, dtype=np.float32)
        xs.append(normalize(img))
        ys.append(k)
    return np.stack(xs).astype(np.float32), np.array(ys, dtype=np.int64)


def synthetic_dataset(seed: int = 42, per_class: int = 16, size: int = 64, classes: int = 3,
                      val_per_class: int = 4) -> InMemoryDataset:
    x, y = synthetic_images(seed, per_class, size, classes)
    xv, yv = synthetic_images(seed, val_per_class, size, classes, offset=per_class * classes)
    names = CLASSES if classes == 3 else tuple(str(i) for i in range(classes))
    return InMemoryDataset(x, y, xv, yv, names)
