"""Image IO, augmentation, dataset splits and the synthetic speckle corpus."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

from .degrade import gaussian_blur

IMAGE_SUFFIXES = (".png", ".pgm")
MANIFEST_NAME = "manifest.txt"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image IO


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG/PGM as float64 in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            mode = im.mode
            if mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale, got mode {mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except DataError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Clamp to [0, 1] and write as 8-bit grayscale; format from the suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    PILImage.fromarray(to_uint8(np.asarray(img)), mode="L").save(path, format=fmt)


def content_hash(img: np.ndarray) -> str:
    """Hash of the 8-bit quantized pixels, stable across save/load."""
    q = to_uint8(np.asarray(img))
    h = hashlib.sha256(str(q.shape).encode())
    h.update(q.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# augmentation


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize with pixel-center alignment (same size is the identity)."""
    if out_w is None:
        out_w = out_h
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def random_resized_crop(img: np.ndarray, rng: np.random.Generator,
                        scale_range: tuple = (0.6, 1.0), out_side: int | None = None) -> np.ndarray:
    """Square crop covering a random area fraction, resized to ``out_side``."""
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise DataError(f"scale range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    h, w = img.shape
    if out_side is None:
        out_side = min(h, w)
    area = rng.uniform(lo, hi) * h * w
    side = int(round(math.sqrt(area)))
    side = max(1, side)
    if side > min(h, w):
        raise DataError(f"crop side {side} larger than image {h}x{w}")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return resize_bilinear(img[top:top + side, left:left + side], out_side)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Item:
    image: np.ndarray
    label: int | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    items: list
    split: str | None = None

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def labeled(self) -> bool:
        return bool(self.items) and all(it.label is not None for it in self.items)

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=int)

    def hashes(self) -> set:
        return {content_hash(it.image) for it in self.items}

    def subset(self, idx: Iterable[int], split: str | None = None) -> "Dataset":
        return Dataset([self.items[i] for i in idx], split)


def assert_disjoint(a: Dataset, b: Dataset, what: str = "datasets") -> None:
    """Leakage guard: no image may occur in both sets (by content hash)."""
    common = a.hashes() & b.hashes()
    if common:
        raise DataError(f"{what} share {len(common)} image(s)")


def _class_dir(label: int) -> str:
    return f"class{label}"


def write_dataset(ds: Dataset, root, suffix: str = ".png") -> None:
    """Labeled sets go to ``root/class{0,1}/``; unlabeled ones flat in ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, it in enumerate(ds.items):
        name = it.name or f"img{i:05d}"
        rel = Path(name + suffix) if it.label is None else Path(_class_dir(it.label)) / (name + suffix)
        save_image(it.image, root / rel)
        lines.append(rel.as_posix() if it.label is None else f"{rel.as_posix()} {it.label}")
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Dataset:
    path = Path(path)
    root = path.parent
    items = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) > 2:
            raise DataError(f"{path}:{lineno}: expected '<path> [label]'")
        label = None
        if len(parts) == 2:
            if parts[1] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1")
            label = int(parts[1])
        items.append(Item(load_image(root / parts[0]), label, Path(parts[0]).stem))
    return Dataset(items)


def load_dataset(root) -> Dataset:
    """Read a directory in either layout, or a manifest file.

    A manifest inside the directory takes precedence over scanning.
    """
    root = Path(root)
    if root.is_file():
        return read_manifest(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such dataset: {root}")
    if (root / MANIFEST_NAME).is_file():
        return read_manifest(root / MANIFEST_NAME)
    items = []
    class_dirs = [root / _class_dir(c) for c in (0, 1)]
    if any(d.is_dir() for d in class_dirs):
        for label, d in enumerate(class_dirs):
            if d.is_dir():
                for f in sorted(d.iterdir()):
                    if f.suffix.lower() in IMAGE_SUFFIXES:
                        items.append(Item(load_image(f), label, f.stem))
    else:
        for f in sorted(root.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                items.append(Item(load_image(f), None, f.stem))
    if not items:
        raise DataError(f"{root}: no images found")
    return Dataset(items)


def _alloc(n: int, ratios: Sequence[float]) -> list[int]:
    """Proportional sizes with floors; the remainder goes to the first part."""
    total = float(sum(ratios))
    sizes = [math.floor(n * r / total) for r in ratios]
    sizes[0] += n - sum(sizes)
    return sizes


def split(ds: Dataset, ratios: Sequence[float] = (3, 1, 1), seed: int = 0):
    """Random train/val/test split, stratified by label when labels exist."""
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"need three positive ratios, got {ratios}")
    rng = np.random.default_rng(seed)
    sizes = _alloc(len(ds), ratios)
    names = ("train", "val", "test")
    if not ds.labeled:
        perm = rng.permutation(len(ds))
        bounds = np.cumsum(sizes)[:-1]
        return tuple(ds.subset(p.tolist(), nm) for p, nm in zip(np.split(perm, bounds), names))

    labels = ds.labels()
    groups = {c: rng.permutation(np.flatnonzero(labels == c)) for c in (0, 1)}
    # per-class quotas for val/test: floors, then largest remainders
    parts = {c: [0, 0, 0] for c in groups}
    for k in (1, 2):
        exact = {c: len(groups[c]) * sizes[k] / len(ds) for c in groups}
        for c in groups:
            parts[c][k] = math.floor(exact[c])
        short = sizes[k] - sum(parts[c][k] for c in groups)
        for c in sorted(groups, key=lambda c: exact[c] - math.floor(exact[c]), reverse=True)[:short]:
            parts[c][k] += 1
    out = {nm: [] for nm in names}
    for c, idx in groups.items():
        n_val, n_test = parts[c][1], parts[c][2]
        out["val"] += idx[:n_val].tolist()
        out["test"] += idx[n_val:n_val + n_test].tolist()
        out["train"] += idx[n_val + n_test:].tolist()
    return tuple(ds.subset(sorted(out[nm]), nm) for nm in names)


# ---------------------------------------------------------------------------
# synthetic speckle corpus


@dataclass(frozen=True)
class SynthSpec:
    count: int = 256
    image_side: int = 32
    speckle_looks: int = 4
    speckle_grain: float = 1.2
    background: tuple = (0.1, 0.4)
    background_cells: int = 4
    spot_count: tuple = (1, 3)
    spot_intensity: float = 1.0
    spot_radius: float = 3.0
    labeled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.image_side < 4 or self.speckle_looks < 1:
            raise DataError("count, image_side and speckle_looks must be positive")
        if not self.speckle_grain > 0 or not self.spot_intensity > 0:
            raise DataError("speckle_grain and spot_intensity must be positive")
        if not 0 < self.spot_radius < self.image_side / 4:
            raise DataError("spot radius must lie in (0, image_side/4)")
        lo, hi = self.spot_count
        if not 1 <= lo <= hi:
            raise DataError("spot_count must be an increasing pair >= 1")
        blo, bhi = self.background
        if not 0 < blo <= bhi <= 1:
            raise DataError("background range must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["spot_count"] = list(self.spot_count)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("background", "spot_count"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _background(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    lo, hi = spec.background
    cells = rng.uniform(lo, hi, size=(spec.background_cells, spec.background_cells))
    return resize_bilinear(cells, spec.image_side)


def _speckle(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    """Multi-look speckle: mean of squared magnitudes of filtered complex noise."""
    n = spec.image_side
    acc = np.zeros((n, n))
    for _ in range(spec.speckle_looks):
        re = gaussian_blur(rng.normal(size=(n, n)), spec.speckle_grain)
        im = gaussian_blur(rng.normal(size=(n, n)), spec.speckle_grain)
        inten = re * re + im * im
        acc += inten / inten.mean()
    return acc / spec.speckle_looks


def spot_profile(side: int, center: tuple, radius: float) -> np.ndarray:
    """Gaussian bump with standard deviation ``radius / 2``."""
    yy, xx = np.mgrid[0:side, 0:side]
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    s = radius / 2.0
    return np.exp(-d2 / (2 * s * s))


def synth_image(rng: np.random.Generator, spec: SynthSpec, label: int) -> tuple:
    """One speckled image; returns (image, spot-free image, spot centers)."""
    base = np.clip(_background(rng, spec) * _speckle(rng, spec), 0.0, 1.0)
    img = base.copy()
    centers = []
    if label == 1:
        k = int(rng.integers(spec.spot_count[0], spec.spot_count[1] + 1))
        margin = spec.spot_radius
        for _ in range(k):
            c = tuple(rng.uniform(margin, spec.image_side - 1 - margin, size=2))
            centers.append(c)
            img += spec.spot_intensity * spot_profile(spec.image_side, c, spec.spot_radius)
        img = np.clip(img, 0.0, 1.0)
    return img, base, centers


def synth_speckle(spec: SynthSpec) -> Dataset:
    """Deterministic corpus of speckled images; label 1 carries bright spots.

    Labels alternate so the classes are balanced to within one image.
    Unlabeled corpora still draw spots on every other image so they share
    the labeled corpus' content distribution.
    """
    rng = np.random.default_rng(spec.seed)
    items = []
    for i in range(spec.count):
        label = i % 2
        img, base, centers = synth_image(rng, spec, label)
        items.append(Item(img, label if spec.labeled else None, f"s{spec.seed}_{i:05d}",
                          {"spots": [list(c) for c in centers], "base": base}))
    return Dataset(items)


def spot_contrast(item: Item, radius: float) -> list[float]:
    """Per spot: mean gain inside the spot core over the spot-free image there."""
    out = []
    base = item.meta["base"]
    side = base.shape[0]
    for c in item.meta["spots"]:
        yy, xx = np.mgrid[0:side, 0:side]
        core = (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= (radius / 2.0) ** 2
        out.append(float(item.image[core].mean() - base[core].mean()))
    return out


def with_seed(spec: SynthSpec, seed: int) -> SynthSpec:
    return replace(spec, seed=seed)
