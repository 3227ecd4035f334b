"""Synthetic few-shot image classes, PNG directory ingestion, and class splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_SIZE = 84
FAMILIES = ("disc", "ring", "bar", "cross", "checker")
SPLITS = ("base", "val", "novel")
DEFAULT_RATIOS = (64, 16, 20)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    family: str
    thickness: int
    texture_period: int
    orientation: int  # degrees
    rotation_jitter: int = 15
    noise_sigma: float = 12.0
    translation_jitter: int = 6

    @property
    def name(self) -> str:
        return f"c{self.class_id:03d}_{self.family}_t{self.thickness}_p{self.texture_period}_o{self.orientation}"

    def generator_key(self) -> tuple:
        return (self.family, self.thickness, self.texture_period, self.orientation)


@dataclass
class DatasetSplit:
    """Per-class image stacks plus a base/val/novel partition of the class ids."""

    images: dict[int, np.ndarray]
    base: list[int]
    val: list[int]
    novel: list[int]
    names: dict[int, str] = field(default_factory=dict)
    specs: dict[int, ClassSpec] = field(default_factory=dict)

    def __post_init__(self):
        lists = [set(self.base), set(self.val), set(self.novel)]
        if sum(map(len, lists)) != len(set().union(*lists)):
            raise DatasetError("base/val/novel class lists overlap")
        if set().union(*lists) != set(self.images):
            raise DatasetError("base/val/novel class lists do not cover exactly the classes with images")

    def classes(self, which: str | Sequence[str]) -> list[int]:
        """Class ids of one split, or of several joined with '+', e.g. 'val+novel'."""
        parts = which.split("+") if isinstance(which, str) else list(which)
        out: list[int] = []
        for part in parts:
            if part not in SPLITS:
                raise DatasetError(f"unknown split {part!r}; expected one of {SPLITS}")
            out += getattr(self, part)
        return out

    def subset(self, which: str | Sequence[str]) -> dict[int, np.ndarray]:
        return {c: self.images[c] for c in self.classes(which)}


# ------------------------------------------------------------------- splitting


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer sizes summing to ``n`` proportional to ``ratios``; leftovers go to the largest remainders."""
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    leftover = n - sum(sizes)
    # stable order: larger remainder first, earlier bucket on ties
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_classes(
    class_ids: Sequence[int], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0
) -> tuple[list[int], list[int], list[int]]:
    """Shuffle ``class_ids`` with ``seed`` and cut them into base/val/novel by ``ratios``."""
    if len(ratios) != 3:
        raise DatasetError(f"need three ratios (base, val, novel), got {list(ratios)}")
    if any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise DatasetError(f"ratios must be non-negative with a positive sum, got {list(ratios)}")
    buckets = sum(1 for r in ratios if r > 0)
    ids = list(class_ids)
    if len(set(ids)) != len(ids):
        raise DatasetError("class ids must be unique")
    if len(ids) < buckets:
        raise DatasetError(f"{len(ids)} classes cannot fill {buckets} non-empty split buckets")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    nb, nv, _ = largest_remainder(len(ids), ratios)
    return shuffled[:nb], shuffled[nb : nb + nv], shuffled[nb + nv :]


# ------------------------------------------------------------------ synthesis


def class_specs(n_classes: int, seed: int) -> list[ClassSpec]:
    """Deterministic class definitions; classes of one family differ in stroke, texture and orientation."""
    rng = np.random.default_rng([seed, 1])
    specs = []
    seen = set()
    for c in range(n_classes):
        family = FAMILIES[c % len(FAMILIES)]
        v = c // len(FAMILIES)
        thickness, period = 3 + (v % 3) * 2, 4 + (v % 4) * 3
        orientation = int((v * 47 + rng.integers(0, 30)) % 180)
        # nudge the angle until the parameter tuple is new
        while (family, thickness, period, orientation) in seen:
            orientation = (orientation + 7) % 180
        spec = ClassSpec(c, family, thickness, period, orientation)
        seen.add(spec.generator_key())
        specs.append(spec)
    return specs


_GRID = np.arange(IMAGE_SIZE) - IMAGE_SIZE // 2


def render(spec: ClassSpec, rng: np.random.Generator) -> np.ndarray:
    """One 3×84×84 uint8 image of a class, with pose and noise jitter drawn from ``rng``."""
    ty, tx = rng.integers(-spec.translation_jitter, spec.translation_jitter + 1, 2)
    angle = math.radians(spec.orientation + rng.integers(-spec.rotation_jitter, spec.rotation_jitter + 1))
    radius = int(rng.integers(22, 30))
    y = (_GRID - ty)[:, None]
    x = (_GRID - tx)[None, :]
    c, s = math.cos(angle), math.sin(angle)
    # snap the rotated frame back onto the integer grid
    u = np.rint(c * x + s * y).astype(np.int64)
    v = np.rint(-s * x + c * y).astype(np.int64)
    r2 = u * u + v * v
    t = spec.thickness
    if spec.family == "disc":
        shape = r2 <= radius * radius
    elif spec.family == "ring":
        shape = (r2 <= radius * radius) & (r2 >= (radius - 2 * t) ** 2)
    elif spec.family == "bar":
        shape = (np.abs(v) <= 2 * t) & (np.abs(u) <= radius)
    elif spec.family == "cross":
        shape = ((np.abs(v) <= t) & (np.abs(u) <= radius)) | ((np.abs(u) <= t) & (np.abs(v) <= radius))
    else:
        cell = 2 * t
        shape = (np.abs(u) <= radius) & (np.abs(v) <= radius) & (((u // cell) + (v // cell)) % 2 == 0)
    stripes = (u // spec.texture_period) % 2 == 0
    # colour is a per-image nuisance, never a class cue
    fg = rng.integers(90, 256, 3)[:, None, None]
    dark = fg // 3
    background = int(rng.integers(20, 60))
    img = np.where(shape, np.where(stripes, fg, dark), background)
    noise = np.rint(rng.normal(0.0, spec.noise_sigma, img.shape)).astype(np.int64)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def generate_synthetic(
    n_classes: int = 20,
    images_per_class: int = 50,
    seed: int = 0,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> DatasetSplit:
    """Procedural dataset: ``n_classes`` classes split base/val/novel by ``ratios``."""
    if n_classes < 5:
        raise DatasetError(f"synthetic dataset needs at least 5 classes, got {n_classes}")
    if images_per_class < 1:
        raise DatasetError(f"images_per_class must be positive, got {images_per_class}")
    specs = class_specs(n_classes, seed)
    images = {}
    for spec in specs:
        rng = np.random.default_rng([seed, 2, spec.class_id])
        stack = np.stack([render(spec, rng) for _ in range(images_per_class)])
        images[spec.class_id] = stack.astype(np.float64) / 255.0
    base, val, novel = split_classes([s.class_id for s in specs], ratios, seed)
    return DatasetSplit(
        images, base, val, novel, names={s.class_id: s.name for s in specs}, specs={s.class_id: s for s in specs}
    )


# ------------------------------------------------------------------ ingestion


class ManifestError(DatasetError):
    pass


class MissingClassDirError(DatasetError):
    pass


class EmptyClassDirError(DatasetError):
    pass


class ImageReadError(DatasetError):
    pass


def read_manifest(path: str | Path) -> list[tuple[str, str]]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: expected '<class_dir_name> <base|val|novel>', got {line!r}")
        entries.append((parts[0], parts[1]))
    if not entries:
        raise ManifestError(f"{path}: manifest lists no classes")
    names = [n for n, _ in entries]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ManifestError(f"{path}: classes listed more than once: {dupes}")
    return entries


def write_manifest(path: str | Path, entries: Sequence[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{name} {split}\n" for name, split in entries))


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a C×H×W array; same-size input comes back unchanged."""
    _, H, W = img.shape
    if (H, W) == (height, width):
        return img.copy()

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(height, H)
    x0, x1, fx = coords(width, W)
    rows = img[:, y0] * (1 - fy)[None, :, None] + img[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageReadError(f"{path}: not a PNG image (format {im.format})")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_image_dir(root_path: str | Path, split_manifest_path: str | Path) -> DatasetSplit:
    """Load ``root/<class>/*.png`` for every class in the manifest, resized to 84×84 in [0, 1]."""
    root = Path(root_path)
    entries = read_manifest(split_manifest_path)
    images: dict[int, np.ndarray] = {}
    names: dict[int, str] = {}
    lists: dict[str, list[int]] = {s: [] for s in SPLITS}
    for cid, (name, split) in enumerate(entries):
        cdir = root / name
        if not cdir.is_dir():
            raise MissingClassDirError(f"class {name!r} is listed in the manifest but {cdir} is not a directory")
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise EmptyClassDirError(f"class {name!r}: no .png images in {cdir}")
        stack = [resize_bilinear(_read_png(f), IMAGE_SIZE, IMAGE_SIZE) for f in files]
        images[cid] = np.clip(np.stack(stack), 0.0, 1.0)
        names[cid] = name
        lists[split].append(cid)
    return DatasetSplit(images, lists["base"], lists["val"], lists["novel"], names=names)


def save_image_dir(split: DatasetSplit, root: str | Path) -> Path:
    """Write a split as ``root/<class>/NNNN.png`` plus ``root/manifest.txt``; returns the manifest path."""
    from PIL import Image

    root = Path(root)
    entries = []
    for which in SPLITS:
        for cid in getattr(split, which):
            name = split.names.get(cid, f"class{cid:03d}")
            cdir = root / name
            cdir.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(split.images[cid]):
                pixels = np.rint(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
                Image.fromarray(pixels, "RGB").save(cdir / f"{i:04d}.png")
            entries.append((name, which))
    write_manifest(root / "manifest.txt", entries)
    return root / "manifest.txt"
