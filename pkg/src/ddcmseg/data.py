"""Tile storage, patch sampling with flip augmentation, class statistics,
and a synthetic dataset generator for desk-scale experiments.

Dataset layout on disk:

    root/images/*.png    8-bit RGB tiles
    root/labels/*.png    single-channel class-index maps (same file names)
    root/palette.txt     lines "index R G B name"
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DataError

# Standard aerial-labeling palette; index order follows the usual class
# listing (surfaces, buildings, trees, low vegetation, cars, clutter).
ISPRS_CLASS_NAMES = (
    "impervious_surface", "building", "tree", "low_vegetation", "car", "clutter",
)
ISPRS_COLORS = (
    (255, 255, 255), (0, 0, 255), (0, 255, 0), (0, 255, 255), (255, 255, 0), (255, 0, 0),
)
CLUTTER_NAME = "clutter"


def write_palette(path, names, colors) -> None:
    lines = [f"{i} {r} {g} {b} {name}" for i, (name, (r, g, b)) in enumerate(zip(names, colors))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_palette(path) -> tuple[list[str], list[tuple[int, int, int]]]:
    names: list[str] = []
    colors: list[tuple[int, int, int]] = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read palette file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 'index R G B name', got {line!r}")
        idx, r, g, b, name = parts
        if int(idx) != len(names):
            raise DataError(f"{path}:{lineno}: palette indices must be consecutive from 0")
        names.append(name)
        colors.append((int(r), int(g), int(b)))
    if not names:
        raise DataError(f"{path}: palette file is empty")
    return names, colors


def pil_palette(colors) -> list[int]:
    flat = [v for rgb in colors for v in rgb]
    flat += [0] * (768 - len(flat))
    return flat


class TileDataset:
    """Directory-backed collection of (image, label) tile pairs."""

    def __init__(self, root):
        self.root = Path(root)
        palette_path = self.root / "palette.txt"
        self.class_names, self.colors = read_palette(palette_path)
        self.class_count = len(self.class_names)
        img_dir = self.root / "images"
        lab_dir = self.root / "labels"
        if not img_dir.is_dir() or not lab_dir.is_dir():
            raise DataError(f"{self.root}: expected images/ and labels/ subdirectories")
        images = sorted(img_dir.glob("*.png"))
        if not images:
            raise DataError(f"{img_dir}: no PNG tiles found")
        self.entries: list[tuple[Path, Path]] = []
        for img in images:
            lab = lab_dir / img.name
            if not lab.is_file():
                raise DataError(f"missing label tile for {img.name}")
            self.entries.append((img, lab))
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def load_pair(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (image uint8 (h, w, 3), label uint8 (h, w)); cached."""
        if index not in self._cache:
            img_path, lab_path = self.entries[index]
            image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
            label = np.asarray(Image.open(lab_path), dtype=np.uint8)
            if label.ndim != 2:
                raise DataError(f"{lab_path}: label tile must be a single-channel index map")
            if label.shape != image.shape[:2]:
                raise DataError(
                    f"{lab_path}: label size {label.shape} differs from image "
                    f"{image.shape[:2]}"
                )
            if int(label.max()) >= self.class_count:
                raise DataError(
                    f"{lab_path}: label value {int(label.max())} outside "
                    f"[0, {self.class_count})"
                )
            self._cache[index] = (image, label)
        return self._cache[index]

    def validate(self) -> None:
        for i in range(len(self)):
            self.load_pair(i)


@dataclass(frozen=True)
class ClassStats:
    """Median-frequency class balance statistics.

    freq[c] is (pixels of class c) / (total pixels of tiles where c occurs);
    the median is taken over classes present anywhere.  Weights are
    median / freq, and 0 (with a warning) for absent classes.
    """

    freq: np.ndarray
    median_freq: float
    weights: np.ndarray
    present: np.ndarray


def compute_class_stats(ds: TileDataset) -> ClassStats:
    if len(ds) == 0:
        raise DataError("cannot compute class statistics on an empty dataset")
    c = ds.class_count
    pixels = np.zeros(c, dtype=np.int64)
    denom = np.zeros(c, dtype=np.int64)
    for i in range(len(ds)):
        _, label = ds.load_pair(i)
        counts = np.bincount(label.ravel(), minlength=c)
        pixels += counts
        denom[counts > 0] += label.size
    present = pixels > 0
    freq = np.zeros(c, dtype=np.float64)
    freq[present] = pixels[present] / denom[present]
    median = float(np.median(freq[present]))
    weights = np.zeros(c, dtype=np.float64)
    weights[present] = median / freq[present]
    for idx in np.flatnonzero(~present):
        warnings.warn(f"class {ds.class_names[idx]!r} absent from dataset; weight set to 0")
    return ClassStats(freq=freq, median_freq=median, weights=weights, present=present)


@dataclass(frozen=True)
class PatchSampler:
    """Uniform random patch positions with independent horizontal/vertical flips."""

    patch_size: int = 256
    patches_per_epoch: int = 5000
    seed: int = 0
    hflip: bool = True
    vflip: bool = True


def sample_epoch(ds: TileDataset, sampler: PatchSampler, epoch: int = 0):
    """Yield exactly ``patches_per_epoch`` (image, label) patches.

    Images come out as float32 (3, p, p) scaled into [0, 1] by dividing by
    255; labels as int64 (p, p) carried through the same flips.  The stream
    is a pure function of (sampler.seed, epoch).
    """
    ps = sampler.patch_size
    for _, lab in (ds.load_pair(i) for i in range(len(ds))):
        if lab.shape[0] < ps or lab.shape[1] < ps:
            raise DataError(f"tile size {lab.shape} smaller than patch size {ps}")
    rng = np.random.default_rng(np.random.SeedSequence((sampler.seed, epoch)))
    for _ in range(sampler.patches_per_epoch):
        idx = int(rng.integers(len(ds)))
        image, label = ds.load_pair(idx)
        h, w = label.shape
        y0 = int(rng.integers(h - ps + 1))
        x0 = int(rng.integers(w - ps + 1))
        img = image[y0:y0 + ps, x0:x0 + ps]
        lab = label[y0:y0 + ps, x0:x0 + ps]
        if sampler.hflip and rng.random() < 0.5:
            img = img[:, ::-1]
            lab = lab[:, ::-1]
        if sampler.vflip and rng.random() < 0.5:
            img = img[::-1]
            lab = lab[::-1]
        img_chw = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)
        yield img_chw, np.ascontiguousarray(lab, dtype=np.int64)


# -- synthetic data -----------------------------------------------------------

# Image-space base colors for painted primitives (per class index).  Roads are
# painted as darker surface so class 0 has two appearance modes.
_CLASS_BASE_COLORS = {
    0: (190, 190, 190),   # open surface
    1: (160, 70, 60),     # building roofs
    2: (30, 110, 45),     # trees
    3: (120, 190, 100),   # low vegetation
    4: (230, 205, 50),    # cars
    5: (150, 60, 170),    # clutter
}
_ROAD_COLOR = (115, 115, 120)


def _jitter(rng, color, spread=14):
    return tuple(int(np.clip(v + rng.integers(-spread, spread + 1), 0, 255)) for v in color)


def generate_synthetic(out_dir, tiles: int = 8, size: int = 256, classes: int = 6,
                       seed: int = 7) -> TileDataset:
    """Write a deterministic toy dataset of colored geometric primitives.

    Rectangles stand in for buildings, ribbons for roads (labelled as
    surface), round blobs for trees and low vegetation, small boxes for cars,
    scattered polygons for clutter; the background is open surface.  Labels
    are exact; image colors are class-correlated with mild noise.
    """
    if size < 64:
        raise ConfigError(f"synthetic tile size must be >= 64, got {size}")
    if not 2 <= classes <= 6:
        raise ConfigError(f"synthetic class count must be in [2, 6], got {classes}")
    if tiles < 1:
        raise ConfigError(f"tile count must be >= 1, got {tiles}")

    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc

    names = list(ISPRS_CLASS_NAMES[:classes])
    colors = list(ISPRS_COLORS[:classes])
    write_palette(root / "palette.txt", names, colors)
    rng = np.random.default_rng(seed)

    for t in range(tiles):
        img = Image.new("RGB", (size, size), _jitter(rng, _CLASS_BASE_COLORS[0], 6))
        lab = Image.new("P", (size, size), 0)
        lab.putpalette(pil_palette(colors))
        di = ImageDraw.Draw(img)
        dl = ImageDraw.Draw(lab)

        def even(value):
            return int(value) & ~1

        def blob(cls, color, radius_lo, radius_hi, count):
            for _ in range(count):
                r = int(rng.integers(radius_lo, radius_hi + 1))
                cx = int(rng.integers(r, size - r))
                cy = int(rng.integers(r, size - r))
                box = (cx - r, cy - r, cx + r, cy + r)
                di.ellipse(box, fill=_jitter(rng, color))
                dl.ellipse(box, fill=cls)

        def box(cls, color, x0, y0, bw, bh, spread=14):
            # inclusive PIL corners: a span of bw pixels ends at x0 + bw - 1
            shape = (x0, y0, x0 + bw - 1, y0 + bh - 1)
            di.rectangle(shape, fill=_jitter(rng, color, spread))
            dl.rectangle(shape, fill=cls)

        # few, chunky primitives keep the boundary-pixel share low so
        # desk-scale models are not dominated by edge quantization

        # low vegetation first so later primitives may overlap it
        if classes > 3:
            blob(3, _CLASS_BASE_COLORS[3], size // 7, size // 5, int(rng.integers(1, 3)))

        # one road band, surface class
        horizontal = bool(rng.random() < 0.5)
        width = even(rng.integers(size // 7, size // 5))
        pos = even(rng.integers(0, size - width))
        if horizontal:
            road_box = (0, pos, size, pos + width)
            box(0, _ROAD_COLOR, 0, pos, size, width, spread=8)
        else:
            road_box = (pos, 0, pos + width, size)
            box(0, _ROAD_COLOR, pos, 0, width, size, spread=8)

        # buildings
        for _ in range(int(rng.integers(2, 4))):
            bw = even(rng.integers(size // 5, size // 3))
            bh = even(rng.integers(size // 5, size // 3))
            box(1, _CLASS_BASE_COLORS[1], even(rng.integers(0, size - bw)),
                even(rng.integers(0, size - bh)), bw, bh)

        # trees
        if classes > 2:
            blob(2, _CLASS_BASE_COLORS[2], size // 10, size // 7, int(rng.integers(2, 4)))

        # clutter
        if classes > 5:
            blob(5, _CLASS_BASE_COLORS[5], size // 12, size // 9, int(rng.integers(1, 3)))

        # cars on the road band
        if classes > 4:
            x0r, y0r, x1r, y1r = road_box
            for _ in range(int(rng.integers(2, 4))):
                cw = even(rng.integers(12, 19))
                ch = even(rng.integers(8, 13))
                cx = even(rng.integers(x0r, max(x0r + 1, x1r - cw)))
                cy = even(rng.integers(y0r, max(y0r + 1, y1r - ch)))
                box(4, _CLASS_BASE_COLORS[4], cx, cy, cw, ch, spread=25)

        arr = np.asarray(img, dtype=np.int16)
        noise = rng.normal(0.0, 5.0, size=arr.shape)
        arr = np.clip(arr + noise, 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(root / "images" / f"tile_{t:03d}.png")
        lab.save(root / "labels" / f"tile_{t:03d}.png")

    return TileDataset(root)
