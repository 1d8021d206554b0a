"""Segmentation samples, datasets, directory ingestion and a synthetic shapes generator.

Masks are single-label: every pixel carries exactly one class id (or the
ignore index). Multi-label annotations must be flattened before ingestion.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    """Raised when a dataset directory or sample is malformed."""


@dataclass(frozen=True, eq=False)
class SegSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, int64 class ids or ignore index
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mask.shape)

    def with_mask(self, mask: np.ndarray, **meta: Any) -> "SegSample":
        return replace(self, mask=mask, meta={**self.meta, **meta})


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[SegSample, ...]
    class_names: tuple[str, ...]
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate sample ids: {dup[:5]}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SegSample]:
        return iter(self.samples)

    def __getitem__(self, idx: int) -> SegSample:
        return self.samples[idx]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: str) -> SegSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def with_samples(self, samples: Iterable[SegSample]) -> "Dataset":
        return Dataset(tuple(samples), self.class_names, self.ignore_index)

    def present_classes(self) -> set[int]:
        out: set[int] = set()
        for s in self.samples:
            out.update(int(v) for v in np.unique(s.mask) if v != self.ignore_index)
        return out


def validate_sample(sample: SegSample, n_classes: int, ignore_index: int = IGNORE_INDEX) -> SegSample:
    """Return ``sample`` unchanged if it satisfies the sample invariants.

    All violations are collected and reported together, each prefixed with
    the offending field name.
    """
    problems = []
    img, mask = sample.image, sample.mask
    if img.ndim != 3 or img.shape[-1] != 3:
        problems.append(f"image: expected HxWx3 array, got shape {img.shape}")
    if mask.ndim != 2:
        problems.append(f"mask: expected HxW array, got shape {mask.shape}")
    if img.ndim == 3 and mask.ndim == 2 and img.shape[:2] != mask.shape:
        problems.append(f"mask: shape {mask.shape} does not match image {img.shape[:2]}")
    if img.size and (not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0):
        problems.append(
            f"image: values must lie in [0, 1], got range [{np.nanmin(img):.4g}, {np.nanmax(img):.4g}]"
        )
    if not np.issubdtype(mask.dtype, np.integer):
        problems.append(f"mask: integer dtype required, got {mask.dtype}")
    else:
        bad = np.unique(mask[(mask != ignore_index) & ((mask < 0) | (mask >= n_classes))])
        if bad.size:
            problems.append(f"mask: values {bad.tolist()} outside 0..{n_classes - 1} and != {ignore_index}")
    if problems:
        raise DatasetError(f"sample {sample.id!r} invalid: " + "; ".join(problems))
    return sample


def validate_dataset(dataset: Dataset) -> Dataset:
    for s in dataset:
        validate_sample(s, dataset.n_classes, dataset.ignore_index)
    return dataset


# -- directory ingestion -----------------------------------------------------


def _list_images(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def read_class_names(path: Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def load_dataset(
    root: str | Path,
    ignore_index: int = IGNORE_INDEX,
    class_names: Sequence[str] | None = None,
) -> Dataset:
    """Load ``root/images/*`` and ``root/masks/*`` pairs matched by file stem.

    Class names come from ``class_names`` or ``root/classes.txt``; when neither
    exists they are inferred from the largest mask value.
    """
    root = Path(root)
    images = _list_images(root / "images")
    masks = _list_images(root / "masks")
    if not images and not masks:
        raise DatasetError(f"no samples found under {root}")
    for stem in sorted(set(images) ^ set(masks)):
        orphan = images.get(stem) or masks.get(stem)
        raise DatasetError(f"no matching pair for {orphan}")

    if class_names is None and (root / "classes.txt").exists():
        class_names = read_class_names(root / "classes.txt")

    raw = []
    for stem in sorted(images):
        with Image.open(images[stem]) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(masks[stem]) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise DatasetError(f"{masks[stem]}: mask must be single-channel, got mode {im.mode}")
            mask = np.asarray(im, dtype=np.int64)
        if img.shape[:2] != mask.shape:
            raise DatasetError(f"{masks[stem]}: mask shape {mask.shape} != image shape {img.shape[:2]}")
        raw.append((stem, img, mask))

    if class_names is None:
        top = max(int(m[m != ignore_index].max(initial=0)) for _, _, m in raw)
        class_names = ["background"] + [f"class_{i}" for i in range(1, top + 1)]
    n_classes = len(class_names)

    samples = []
    for stem, img, mask in raw:
        bad = np.unique(mask[(mask != ignore_index) & (mask >= n_classes)])
        if bad.size:
            raise DatasetError(
                f"{masks[stem]}: mask value {int(bad[0])} exceeds class count {n_classes} "
                f"(ignore_index={ignore_index})"
            )
        samples.append(SegSample(stem, img, mask, {"source": str(root)}))
    logger.info("loaded %d samples (%d classes) from %s", len(samples), n_classes, root)
    return Dataset(tuple(samples), tuple(class_names), ignore_index)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write a dataset in the ``images/``, ``masks/``, ``classes.txt`` layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(dataset.class_names) + "\n")
    for s in dataset:
        if s.mask.min(initial=0) < 0 or s.mask.max(initial=0) > 255:
            raise DatasetError(f"sample {s.id!r}: mask values do not fit in 8 bits")
        Image.fromarray(image_to_uint8(s.image), mode="RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{s.id}.png")
    return root


# -- synthetic shapes --------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if kind == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r + 2.0 * np.abs(dx))
    if kind == "cross":
        t = 0.35 * r
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= 1.2 * r)
    if kind == "vbar":
        return (np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= 1.2 * r)
    raise ValueError(kind)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    from scipy.ndimage import gaussian_filter, zoom

    base = np.array([0.55, 0.32, 0.30]) + rng.normal(0, 0.04, 3)
    coarse = rng.normal(0, 1, (max(h // 8, 2), max(w // 8, 2), 3))
    field_ = zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=1)[:h, :w]
    field_ = gaussian_filter(field_, sigma=(2, 2, 0))
    img = base + 0.06 * field_ + rng.normal(0, 0.015, (h, w, 3))
    return img


def synth_shapes_dataset(
    n_samples: int,
    n_classes: int,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    extra_shape_prob: float = 0.3,
    ignore_index: int = IGNORE_INDEX,
) -> Dataset:
    """Generate images of colored shapes on a textured background, with exact masks.

    Class ``c >= 1`` always uses the same shape type and a class-specific hue,
    so the task is learnable by a small network. Each image holds one primary
    shape (classes are cycled so every class appears once ``n_samples >=
    n_classes - 1``) and, with probability ``extra_shape_prob``, a second one.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2 (class 0 is background), got {n_classes}")
    h, w = size
    if h < 32 or w < 32:
        raise ValueError(f"image size must be at least 32x32, got {size}")
    rng = np.random.default_rng(seed)
    n_fg = n_classes - 1
    primaries = np.resize(np.arange(1, n_classes), n_samples)
    rng.shuffle(primaries)

    # hues spread over [0.15, 0.85] to stay clear of the reddish background
    hues = [0.15 + 0.7 * (c - 1) / max(n_fg - 1, 1) for c in range(1, n_classes)]
    samples = []
    for i in range(n_samples):
        img = _background(rng, h, w)
        mask = np.zeros((h, w), dtype=np.int64)
        classes = [int(primaries[i])]
        if rng.random() < extra_shape_prob:
            classes.insert(0, int(rng.integers(1, n_classes)))
        for c in classes:
            r = rng.uniform(0.14, 0.24) * min(h, w)
            cy = rng.uniform(r, h - r)
            cx = rng.uniform(r, w - r)
            region = _shape_mask(SHAPES[(c - 1) % len(SHAPES)], h, w, cy, cx, r)
            hue = (hues[c - 1] + rng.normal(0, 0.015)) % 1.0
            rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.85), rng.uniform(0.6, 0.9)))
            shade = 1.0 - 0.15 * (np.mgrid[0:h, 0:w][0] - cy) / (2 * r)
            img[region] = rgb * shade[region][:, None]
            mask[region] = c
        img = np.clip(img + rng.normal(0, 0.01, img.shape), 0.0, 1.0).astype(np.float32)
        samples.append(SegSample(f"synth_{seed}_{i:05d}", img, mask, {"source": "synth", "seed": seed}))
    names = ["background"] + [f"{SHAPES[(c - 1) % len(SHAPES)]}_{c}" for c in range(1, n_classes)]
    return Dataset(tuple(samples), tuple(names), ignore_index)


def train_test_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic random split (4:1 by default)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    test_idx = set(order[:n_test].tolist())
    train = [s for i, s in enumerate(dataset) if i not in test_idx]
    test = [s for i, s in enumerate(dataset) if i in test_idx]
    return dataset.with_samples(train), dataset.with_samples(test)
