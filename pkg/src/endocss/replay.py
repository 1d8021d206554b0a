"""Pseudo-replay set construction.

Pipeline: score previous-task images by per-class IoU under the previous
model, keep the top ``k`` per class, synthesize variants of each kept image
with a generator plugin, label the variants with the previous model and
discard pixels whose predictive entropy is not below ``theta``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from .datamodel import IGNORE_INDEX, Dataset, DatasetError, SegSample, image_to_uint8
from .segmodel import predict_masks, predict_probs

logger = logging.getLogger(__name__)


class ReplayError(RuntimeError):
    pass


# -- source scoring and selection --------------------------------------------


@dataclass(frozen=True)
class SourceScore:
    sample_id: str
    ious: dict[int, float]


def sample_class_ious(pred: np.ndarray, gt: np.ndarray, classes: Iterable[int] | None = None,
                      ignore_index: int = IGNORE_INDEX) -> dict[int, float]:
    """IoU of each foreground class present in ``gt`` (restricted to ``classes``)."""
    valid = gt != ignore_index
    present = [int(c) for c in np.unique(gt[valid]) if c != 0]
    if classes is not None:
        allowed = set(classes)
        present = [c for c in present if c in allowed]
    out = {}
    for c in present:
        g = (gt == c) & valid
        p = (pred == c) & valid
        union = np.count_nonzero(g | p)
        out[c] = np.count_nonzero(g & p) / union
    return out


def score_sources(prev_model, prev_data: Dataset, classes: Iterable[int] | None = None,
                  batch_size: int = 32) -> list[SourceScore]:
    """One :class:`SourceScore` per sample of the previous task's data."""
    classes = None if classes is None else list(classes)
    images = np.stack([s.image for s in prev_data]) if len(prev_data) else np.zeros((0, 1, 1, 3))
    preds = predict_masks(prev_model, images, batch_size) if len(prev_data) else []
    return [
        SourceScore(s.id, sample_class_ious(p, s.mask, classes, prev_data.ignore_index))
        for s, p in zip(prev_data, preds)
    ]


def select_exemplar_sources(scores: Sequence[SourceScore], k_per_class: int,
                            classes: Iterable[int] | None = None) -> dict[int, list[str]]:
    """Top-``k`` sample ids per class by that class's IoU.

    Ranking is descending IoU with ascending sample id breaking ties. A
    sample can be picked for several classes.
    """
    if k_per_class < 1:
        raise ValueError(f"k_per_class must be >= 1, got {k_per_class}")
    wanted = sorted({c for s in scores for c in s.ious} if classes is None else set(classes))
    out: dict[int, list[str]] = {}
    for c in wanted:
        ranked = sorted(((s.ious[c], s.sample_id) for s in scores if c in s.ious), key=lambda t: (-t[0], t[1]))
        if len(ranked) < k_per_class:
            logger.warning("class %d has only %d scored samples (< k=%d)", c, len(ranked), k_per_class)
        out[c] = [sid for _, sid in ranked[:k_per_class]]
    return out


# -- entropy filtering -------------------------------------------------------


def entropy_map(probs: np.ndarray, atol: float = 1e-5) -> np.ndarray:
    """Per-pixel Shannon entropy (natural log) over the last axis, ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise ValueError(f"probabilities must sum to 1 within {atol}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def filter_pseudo_label(probs: np.ndarray, theta: float, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Argmax class where entropy < ``theta``, else ``ignore_index``.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    if not theta > 0:
        raise ValueError(f"theta must be > 0, got {theta}")
    ent = entropy_map(probs)
    labels = np.argmax(probs, axis=-1).astype(np.int64)
    labels[~(ent < theta)] = ignore_index
    return labels


def default_theta(n_classes: int) -> float:
    return 0.5 * math.log(n_classes)


# -- generators --------------------------------------------------------------


@runtime_checkable
class GeneratorPlugin(Protocol):
    name: str

    def generate(self, source_image: np.ndarray, n_variants: int, seed: int) -> list[np.ndarray]: ...


class IdentityGenerator:
    name = "identity"

    def generate(self, source_image, n_variants, seed):
        return [np.array(source_image, copy=True) for _ in range(n_variants)]


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    from matplotlib.colors import rgb_to_hsv

    return rgb_to_hsv(np.clip(img, 0, 1))


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb

    return hsv_to_rgb(img)


class JitterWarpGenerator:
    """Cheap single-image variant generator used in place of a trained GAN.

    Each variant gets a random brightness/contrast/hue shift followed by a
    smooth elastic displacement field. Amplitudes are deliberately small so
    the previous model still recognizes the content.
    """

    name = "jitter_warp"

    def __init__(self, brightness: float = 0.08, contrast: float = 0.15, hue: float = 0.02,
                 warp_alpha: float = 2.5, warp_sigma: float = 6.0):
        self.brightness = brightness
        self.contrast = contrast
        self.hue = hue
        self.warp_alpha = warp_alpha
        self.warp_sigma = warp_sigma

    def _one(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = img.shape[:2]
        out = img.astype(np.float64)
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = (out - mean) * (1 + rng.uniform(-self.contrast, self.contrast)) + mean
        out = out + rng.uniform(-self.brightness, self.brightness)
        hsv = _rgb_to_hsv(np.clip(out, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-self.hue, self.hue)) % 1.0
        out = _hsv_to_rgb(hsv)
        dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), self.warp_sigma, mode="reflect")
        dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), self.warp_sigma, mode="reflect")
        scale = self.warp_alpha / max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = [yy + scale * dy, xx + scale * dx]
        out = np.stack([map_coordinates(out[..., ch], coords, order=1, mode="reflect") for ch in range(3)], -1)
        return np.clip(out, 0, 1).astype(np.float32)

    def generate(self, source_image, n_variants, seed):
        rng = np.random.default_rng(seed)
        return [self._one(np.asarray(source_image), rng) for _ in range(n_variants)]


GENERATORS = {"identity": IdentityGenerator, "jitter_warp": JitterWarpGenerator}


def make_generator(name: str, **kwargs) -> GeneratorPlugin:
    try:
        return GENERATORS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; known: {sorted(GENERATORS)}") from None


def generate_pseudo_images(plugin: GeneratorPlugin, sources: Sequence[SegSample], n_per_source: int,
                           seed: int = 0) -> list[list[np.ndarray]]:
    """``n_per_source`` variants for each source, in source order."""
    if not sources:
        raise ReplayError("no sources to generate from")
    out = []
    for i, src in enumerate(sources):
        try:
            imgs = plugin.generate(src.image, n_per_source, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        except Exception as exc:
            raise ReplayError(f"generator {plugin.name!r} failed on source {src.id!r}: {exc}") from exc
        if len(imgs) != n_per_source or any(im.shape != src.image.shape for im in imgs):
            raise ReplayError(f"generator {plugin.name!r} returned malformed output for source {src.id!r}")
        out.append([np.clip(np.asarray(im, dtype=np.float32), 0, 1) for im in imgs])
    return out


# -- replay set --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReplayItem:
    id: str
    image: np.ndarray
    mask: np.ndarray
    source_classes: tuple[int, ...]
    source_id: str
    step: int  # protocol step at which the item was generated

    @property
    def source_class(self) -> int:
        return self.source_classes[0]


@dataclass
class ReplaySet:
    items: list[ReplayItem] = field(default_factory=list)
    theta_used: dict[int, float] = field(default_factory=dict)  # step -> theta
    ignore_index: int = IGNORE_INDEX

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i: int) -> ReplayItem:
        return self.items[i]

    def source_classes(self) -> set[int]:
        return {c for it in self.items for c in it.source_classes}

    def cap(self, max_items: int | None) -> "ReplaySet":
        """Keep at most ``max_items``, dropping the oldest first."""
        if max_items is None or len(self.items) <= max_items:
            return self
        return ReplaySet(self.items[-max_items:], dict(self.theta_used), self.ignore_index)


def build_replay_set(
    prev_model,
    prev_data: Dataset,
    plugin: GeneratorPlugin,
    k_per_class: int = 10,
    n_per_source: int = 1,
    theta: float | None = None,
    *,
    classes: Iterable[int] | None = None,
    step: int = 1,
    existing: ReplaySet | None = None,
    seed: int = 0,
    per_class_cap: int | None = None,
) -> ReplaySet:
    """Score, select, generate, pseudo-label and filter; append to ``existing``.

    ``classes`` limits which old classes receive sources (all classes present
    in ``prev_data`` by default). A source picked for several classes is
    generated once. ``per_class_cap`` bounds the number of distinct sources
    per class after ranking.
    """
    n_out = prev_model.n_classes
    theta = default_theta(n_out) if theta is None else theta
    scores = score_sources(prev_model, prev_data, classes)
    selection = select_exemplar_sources(scores, k_per_class, classes)
    if per_class_cap is not None:
        selection = {c: ids[:per_class_cap] for c, ids in selection.items()}
    if not any(selection.values()):
        raise ReplayError("no replay sources")

    served: dict[str, list[int]] = {}
    for c, ids in selection.items():
        for sid in ids:
            served.setdefault(sid, []).append(c)
    source_ids = sorted(served)
    sources = [prev_data.by_id(sid) for sid in source_ids]
    variants = generate_pseudo_images(plugin, sources, n_per_source, seed)

    flat = [im for group in variants for im in group]
    probs = predict_probs(prev_model, np.stack(flat))
    items = []
    for j, (sid, group) in enumerate(zip(source_ids, variants)):
        for v, img in enumerate(group):
            mask = filter_pseudo_label(probs[j * n_per_source + v], theta, prev_data.ignore_index)
            items.append(ReplayItem(f"{sid}~s{step}v{v}", img, mask, tuple(sorted(served[sid])), sid, step))
    logger.info("replay step %d: %d sources, %d items, theta=%.4f", step, len(sources), len(items), theta)

    base = existing if existing is not None else ReplaySet(ignore_index=prev_data.ignore_index)
    return ReplaySet(base.items + items, {**base.theta_used, step: theta}, base.ignore_index)


def save_replay_set(replay: ReplaySet, root: str | Path, class_names: Sequence[str] | None = None) -> Path:
    """Write images/masks like a dataset directory plus ``manifest.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if class_names is not None:
        (root / "classes.txt").write_text("\n".join(class_names) + "\n")
    rows = []
    for it in replay:
        Image.fromarray(image_to_uint8(it.image), mode="RGB").save(root / "images" / f"{it.id}.png")
        Image.fromarray(it.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{it.id}.png")
        rows.append({"id": it.id, "source_id": it.source_id, "source_classes": list(it.source_classes),
                     "step": it.step, "theta": replay.theta_used.get(it.step)})
    manifest = {"ignore_index": replay.ignore_index,
                "theta_used": {str(k): v for k, v in replay.theta_used.items()}, "items": rows}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_replay_set(root: str | Path) -> ReplaySet:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no replay manifest at {path}")
    manifest = json.loads(path.read_text())
    items = []
    for row in manifest["items"]:
        with Image.open(root / "images" / f"{row['id']}.png") as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(root / "masks" / f"{row['id']}.png") as im:
            mask = np.asarray(im, dtype=np.int64)
        items.append(ReplayItem(row["id"], img, mask, tuple(row["source_classes"]), row["source_id"], row["step"]))
    theta = {int(k): v for k, v in manifest["theta_used"].items()}
    return ReplaySet(items, theta, manifest["ignore_index"])
