"""Dataset ingestion, synthetic generation, splits and class weights.

Images are kept as (H, W, 3) float32 rasters in [0, 1]. Optional per-pixel
concept masks are (H, W) int arrays where 0 means background/unlabelled and
positive values are concept ids.
"""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}

# (name, rgb) pairs used round-robin for synthetic motifs
_COLORS = [
    ("red", (0.85, 0.15, 0.15)),
    ("green", (0.15, 0.75, 0.20)),
    ("blue", (0.15, 0.25, 0.85)),
    ("yellow", (0.90, 0.85, 0.15)),
    ("magenta", (0.80, 0.15, 0.80)),
    ("cyan", (0.15, 0.80, 0.80)),
    ("orange", (0.95, 0.55, 0.10)),
    ("purple", (0.50, 0.20, 0.70)),
    ("teal", (0.10, 0.50, 0.50)),
    ("olive", (0.50, 0.50, 0.10)),
]

_SHAPES = ["circle", "square", "triangle", "diamond", "ring", "cross"]


class DatasetError(Exception):
    """Fatal problem while building a dataset."""


@dataclass
class LabeledImage:
    """One image with its class index, stable id and optional concept mask."""

    pixels: np.ndarray
    label: int
    id: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DatasetError(f"image {self.id!r}: expected (H, W, 3) pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DatasetError(f"image {self.id!r}: pixel values outside [0, 1]")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.pixels.shape[:2]:
                raise DatasetError(
                    f"image {self.id!r}: mask shape {self.mask.shape} != image {self.pixels.shape[:2]}"
                )


@dataclass
class DatasetSplit:
    """Train/validation/test partition plus class metadata.

    ``class_weights[c]`` is the inverse-frequency weight N / (C * count_c)
    computed on the train split (all images if the train split is empty).
    ``concept_names`` maps mask concept ids to human-readable names.
    """

    train: list[LabeledImage]
    validation: list[LabeledImage]
    test: list[LabeledImage]
    class_names: list[str]
    class_weights: np.ndarray
    concept_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if np.any(self.class_weights <= 0):
            raise DatasetError("class_weights must be positive")
        ids = [im.id for im in self.train + self.validation + self.test]
        if len(ids) != len(set(ids)):
            raise DatasetError("image ids are not unique across splits")
        for im in self.train + self.validation + self.test:
            if not (0 <= im.label < len(self.class_names)):
                raise DatasetError(f"image {im.id!r}: label {im.label} out of range")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, name: str) -> list[LabeledImage]:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown subset {name!r}")
        return getattr(self, name)

    def image_by_id(self, image_id: str) -> LabeledImage:
        for im in self.train + self.validation + self.test:
            if im.id == image_id:
                return im
        raise KeyError(image_id)


def _split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Per-class split sizes; train/validation rounded, test takes the rest."""
    f_train, f_val, f_test = fractions
    total = f_train + f_val + f_test
    if not np.isclose(total, 1.0):
        raise DatasetError(f"split fractions must sum to 1, got {total}")
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    if n_train + n_val > n:
        n_val = n - n_train
    return n_train, n_val, n - n_train - n_val


def _class_weights(images: list[LabeledImage], num_classes: int) -> np.ndarray:
    counts = np.bincount([im.label for im in images], minlength=num_classes)
    if np.any(counts == 0):
        raise DatasetError("cannot compute class weights: a class has no images")
    return len(images) / (num_classes * counts.astype(np.float64))


def _assemble(
    per_class: list[list[LabeledImage]],
    class_names: list[str],
    fractions: tuple[float, float, float],
    rng: np.random.Generator,
    concept_names: dict[int, str] | None = None,
) -> DatasetSplit:
    train: list[LabeledImage] = []
    val: list[LabeledImage] = []
    test: list[LabeledImage] = []
    for images in per_class:
        order = rng.permutation(len(images))
        shuffled = [images[i] for i in order]
        n_train, n_val, _ = _split_counts(len(images), fractions)
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train : n_train + n_val])
        test.extend(shuffled[n_train + n_val :])
    weight_basis = train if train else train + val + test
    return DatasetSplit(
        train=sorted(train, key=lambda im: im.id),
        validation=sorted(val, key=lambda im: im.id),
        test=sorted(test, key=lambda im: im.id),
        class_names=class_names,
        class_weights=_class_weights(weight_basis, len(class_names)),
        concept_names=dict(concept_names or {}),
    )


def _decode_image(path: Path, image_size: int) -> np.ndarray | None:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float32) / 255.0
    except Exception as exc:
        log.warning("skipping undecodable image %s: %s", path, exc)
        return None


def _decode_mask(path: Path, image_size: int) -> np.ndarray:
    # nearest-neighbour resize: concept ids must stay integral
    with Image.open(path) as img:
        img = img.convert("I").resize((image_size, image_size), Image.NEAREST)
        return np.asarray(img, dtype=np.int64)


def load_image_folder(
    root_path: str | Path,
    split_spec: tuple[float, float, float] = (0.8, 0.0, 0.2),
    seed: int = 0,
    image_size: int = 32,
    mask_root: str | Path | None = None,
) -> DatasetSplit:
    """Load a directory-per-class image folder into a deterministic split.

    Class names are the subdirectory names in lexicographic order. Images are
    resized bilinearly to ``image_size``. When ``mask_root`` is given it must
    mirror the class layout with single-channel PNGs whose pixel values are
    concept ids; a ``concepts.json`` file at ``mask_root`` (id -> name) is
    picked up when present.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class subdirectories")
    class_names = [d.name for d in class_dirs]

    per_class: list[list[LabeledImage]] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DatasetError(f"class directory {class_dir} contains no images")
        images = []
        for path in files:
            pixels = _decode_image(path, image_size)
            if pixels is None:
                continue
            mask = None
            if mask_root is not None:
                mask_path = Path(mask_root) / class_dir.name / (path.stem + ".png")
                if mask_path.is_file():
                    mask = _decode_mask(mask_path, image_size)
            images.append(LabeledImage(pixels, label, f"{class_dir.name}/{path.name}", mask))
        if not images:
            raise DatasetError(f"class directory {class_dir} has no decodable images")
        per_class.append(images)

    concept_names: dict[int, str] = {}
    if mask_root is not None:
        concepts_file = Path(mask_root) / "concepts.json"
        if concepts_file.is_file():
            concept_names = {int(k): v for k, v in json.loads(concepts_file.read_text()).items()}

    rng = np.random.default_rng(seed)
    return _assemble(per_class, class_names, split_spec, rng, concept_names)


def synthetic_motifs(num_classes: int) -> list[tuple[str, str, tuple[float, float, float]]]:
    """(class_name, shape, rgb) per class, names sorted lexicographically."""
    motifs = []
    for c in range(num_classes):
        shape = _SHAPES[c % len(_SHAPES)]
        if c < len(_COLORS):
            color_name, rgb = _COLORS[c]
        else:
            hue = (c * 0.37) % 1.0
            color_name, rgb = f"hue{int(hue * 360):03d}", colorsys.hsv_to_rgb(hue, 0.85, 0.85)
        motifs.append((f"{color_name}_{shape}", shape, rgb))
    return sorted(motifs)


def shape_membership(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Boolean (size, size) raster of pixels inside the given shape."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.9 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.75 * r) & (np.abs(dx) <= 0.6 * (dy + r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.2 * r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        arm = 0.33 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def generate_synthetic(
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    seed: int = 0,
    with_masks: bool = False,
    split_spec: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> DatasetSplit:
    """Generate a deterministic shape-on-noise dataset.

    Each class is one (shape, color) motif drawn at a random position and
    scale over a noisy gray background. Masks, when requested, carry concept
    id c + 1 on the pixels of class c's shape and 0 elsewhere.
    """
    if num_classes < 2:
        raise DatasetError("need at least 2 classes")
    if per_class < 10:
        raise DatasetError("need at least 10 images per class")
    if image_size < 16:
        raise DatasetError("image_size must be at least 16")

    motifs = synthetic_motifs(num_classes)
    class_names = [name for name, _, _ in motifs]
    concept_names = {0: "background"}
    concept_names.update({c + 1: name for c, (name, _, _) in enumerate(motifs)})

    rng = np.random.default_rng(seed)
    per_class_images: list[list[LabeledImage]] = []
    for c, (name, shape, rgb) in enumerate(motifs):
        images = []
        for i in range(per_class):
            base = rng.uniform(0.25, 0.45)
            pixels = base + rng.normal(0.0, 0.05, size=(image_size, image_size, 3))
            cx = rng.uniform(0.32, 0.68) * image_size
            cy = rng.uniform(0.32, 0.68) * image_size
            r = rng.uniform(0.20, 0.30) * image_size
            inside = shape_membership(shape, image_size, cx, cy, r)
            color = np.asarray(rgb) + rng.normal(0.0, 0.03, size=3)
            shade = color[None, None, :] + rng.normal(0.0, 0.02, size=(image_size, image_size, 3))
            pixels = np.where(inside[:, :, None], shade, pixels)
            pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
            mask = inside.astype(np.int64) * (c + 1) if with_masks else None
            images.append(LabeledImage(pixels, c, f"{name}/{i:04d}", mask))
        per_class_images.append(images)

    return _assemble(per_class_images, class_names, split_spec, rng, concept_names)


def write_split_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Write the id -> split-name manifest as JSON."""
    manifest = {}
    for name in ("train", "validation", "test"):
        for im in split.subset(name):
            manifest[im.id] = name
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
