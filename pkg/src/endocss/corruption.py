"""Image corruptions with five severity levels and a severity-averaged robustness evaluation.

Parameter tables live in ``data/corruption_severity.json``. Every corruption
takes a float image in [0, 1] and returns one clipped to [0, 1]; stochastic
ones draw only from the generator they are given.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import convolve, gaussian_filter, map_coordinates, zoom

from .datamodel import Dataset
from .metrics import ConfusionMatrix, iou_per_class, miou
from .segmodel import predict_masks

logger = logging.getLogger(__name__)

SEVERITIES = (1, 2, 3, 4, 5)


def load_severity_table() -> dict[str, dict[str, Any]]:
    text = resources.files("endocss").joinpath("data/corruption_severity.json").read_text()
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


SEVERITY_TABLE = load_severity_table()
REQUIRED = tuple(k for k, v in SEVERITY_TABLE.items() if v["required"])
OPTIONAL = tuple(k for k, v in SEVERITY_TABLE.items() if not v["required"])


# -- corruption functions ----------------------------------------------------


def _per_channel(img, fn):
    return np.stack([fn(img[..., c]) for c in range(img.shape[-1])], axis=-1)


def gaussian_noise(img, rng, sigma):
    return img + rng.normal(0.0, sigma, img.shape)


def shot_noise(img, rng, photons):
    return rng.poisson(np.clip(img, 0, 1) * photons) / photons


def impulse_noise(img, rng, amount):
    out = img.copy()
    hit = rng.random(img.shape) < amount
    out[hit] = rng.integers(0, 2, int(hit.sum())).astype(np.float64)
    return out


def speckle_noise(img, rng, sigma):
    return img + img * rng.normal(0.0, sigma, img.shape)


def gaussian_blur(img, rng, sigma):
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def _disk(radius, alias):
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (xx**2 + yy**2 <= radius**2).astype(np.float64)
    k /= k.sum()
    return gaussian_filter(k, alias) if alias > 0 else k


def defocus_blur(img, rng, radius, alias=0.5):
    k = _disk(radius, alias)
    return _per_channel(img, lambda ch: convolve(ch, k, mode="reflect"))


def pixelate(img, rng, factor):
    h, w = img.shape[:2]
    small = (max(1, int(round(w * factor))), max(1, int(round(h * factor))))
    pil = Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
    pil = pil.resize(small, Image.BOX).resize((w, h), Image.NEAREST)
    return np.asarray(pil, dtype=np.float64) / 255.0


def jpeg_compression(img, rng, quality):
    buf = io.BytesIO()
    Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)).save(buf, "JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def brightness(img, rng, delta):
    hsv = rgb_to_hsv(np.clip(img, 0, 1))
    hsv[..., 2] = np.clip(hsv[..., 2] + delta, 0, 1)
    return hsv_to_rgb(hsv)


def contrast(img, rng, factor):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return (img - mean) * factor + mean


def saturate(img, rng, factor):
    hsv = rgb_to_hsv(np.clip(img, 0, 1))
    hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0, 1)
    return hsv_to_rgb(hsv)


def gamma(img, rng, gamma):
    return np.clip(img, 0, 1) ** gamma


def glass_blur(img, rng, sigma, max_delta, iterations):
    h, w = img.shape[:2]
    out = gaussian_blur(img, rng, sigma)
    for _ in range(int(iterations)):
        dy = rng.integers(-max_delta, max_delta + 1, (h, w))
        dx = rng.integers(-max_delta, max_delta + 1, (h, w))
        yy = np.clip(np.arange(h)[:, None] + dy, 0, h - 1)
        xx = np.clip(np.arange(w)[None, :] + dx, 0, w - 1)
        out = out[yy, xx]
    return gaussian_blur(out, rng, sigma)


def motion_blur(img, rng, length):
    n = int(length)
    angle = rng.uniform(-np.pi / 4, np.pi / 4)
    size = 2 * n + 1
    k = np.zeros((size, size))
    for t in np.linspace(0, n, 4 * n + 1):
        y, x = int(round(n + t * np.sin(angle))), int(round(n + t * np.cos(angle)))
        k[y, x] = 1.0
    k /= k.sum()
    return _per_channel(img, lambda ch: convolve(ch, k, mode="nearest"))


def _center_zoom(img, z):
    h, w = img.shape[:2]
    out = zoom(img, (z, z, 1), order=1)
    top, left = (out.shape[0] - h) // 2, (out.shape[1] - w) // 2
    return out[top : top + h, left : left + w]


def zoom_blur(img, rng, max_zoom):
    zooms = np.linspace(1.0, max_zoom, 6)[1:]
    acc = img.copy()
    for z in zooms:
        acc += _center_zoom(img, z)
    return acc / (len(zooms) + 1)


def elastic_transform(img, rng, alpha, sigma):
    h, w = img.shape[:2]
    s = min(h, w)
    dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma * s, mode="reflect")
    dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma * s, mode="reflect")
    norm = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
    dy, dx = dy / norm * alpha * s, dx / norm * alpha * s
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return _per_channel(img, lambda ch: map_coordinates(ch, [yy + dy, xx + dx], order=1, mode="reflect"))


def _fractal_noise(rng, h, w, octaves=4):
    acc = np.zeros((h, w))
    amp = 1.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        coarse = rng.random((cells + 1, cells + 1))
        acc += amp * zoom(coarse, (h / (cells + 1), w / (cells + 1)), order=1)[:h, :w]
        amp *= 0.5
    acc -= acc.min()
    return acc / max(acc.max(), 1e-12)


def smoke(img, rng, density):
    h, w = img.shape[:2]
    haze = _fractal_noise(rng, h, w)
    a = (density * (0.5 + 0.5 * haze))[..., None]
    return img * (1 - a) + 0.85 * a


def spatter(img, rng, coverage):
    h, w = img.shape[:2]
    field_ = gaussian_filter(rng.random((h, w)), sigma=max(1.0, min(h, w) / 40))
    thr = np.quantile(field_, 1 - coverage)
    drops = gaussian_filter((field_ >= thr).astype(np.float64), 0.7)[..., None]
    color = np.array([0.35, 0.05, 0.05])
    return img * (1 - 0.8 * drops) + color * 0.8 * drops


def identity(img, rng):
    return img


CORRUPTIONS: dict[str, Callable[..., np.ndarray]] = {
    f.__name__: f
    for f in (
        gaussian_noise, shot_noise, impulse_noise, speckle_noise, gaussian_blur, defocus_blur, pixelate,
        jpeg_compression, brightness, contrast, saturate, gamma, glass_blur, motion_blur, zoom_blur,
        elastic_transform, smoke, spatter,
    )
}


@dataclass(frozen=True)
class CorruptionSpec:
    name: str
    severity: int
    params: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(cls, name: str, severity: int) -> "CorruptionSpec":
        if name == "identity":
            if severity not in SEVERITIES:
                raise ValueError(f"severity must be in 1..5, got {severity}")
            return cls(name, severity, {})
        if name not in SEVERITY_TABLE:
            raise KeyError(f"unregistered corruption {name!r}")
        if severity not in SEVERITIES:
            raise ValueError(f"severity must be in 1..5, got {severity}")
        return cls(name, severity, dict(SEVERITY_TABLE[name]["levels"][severity - 1]))


def corrupt(image: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``spec`` to a float image in [0, 1]; the result is clipped to [0, 1]."""
    if spec.name == "identity":
        fn = identity
    else:
        try:
            fn = CORRUPTIONS[spec.name]
        except KeyError:
            raise KeyError(f"unregistered corruption {spec.name!r}") from None
    if spec.severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {spec.severity}")
    rng = rng if rng is not None else np.random.default_rng(0)
    img = np.asarray(image, dtype=np.float64)
    out = fn(img, rng, **spec.params)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corruption_seed(seed: int, name: str, severity: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode()), severity, index])


# -- robustness evaluation ---------------------------------------------------


@dataclass
class RobustnessResult:
    clean_miou: float
    rows: list[tuple[str, int, float]]  # (corruption, severity, mIoU)
    curve: dict[int, float]  # severity -> mean mIoU over corruptions; 0 = clean

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["corruption", "severity", "miou"])
        w.writerow(["clean", 0, f"{self.clean_miou:.6f}"])
        for name, sev, m in self.rows:
            w.writerow([name, sev, f"{m:.6f}"])
        return buf.getvalue()

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["severity", "mean_miou"])
        for sev, m in sorted(self.curve.items()):
            w.writerow([sev, f"{m:.6f}"])
        return buf.getvalue()


def _dataset_miou(model, images: np.ndarray, masks: np.ndarray, classes: Sequence[int], n_classes: int,
                  ignore_index: int) -> float:
    preds = predict_masks(model, images)
    cm = ConfusionMatrix(n_classes, ignore_index)
    for p, g in zip(preds, masks):
        cm.update(p, g)
    return miou(iou_per_class(cm), classes)


def robustness_eval(
    model,
    test_set: Dataset,
    corruption_names: Iterable[str] = REQUIRED,
    severities: Iterable[int] = SEVERITIES,
    classes: Sequence[int] | None = None,
    seed: int = 0,
) -> RobustnessResult:
    """mIoU for every (corruption, severity) pair plus the per-severity mean curve.

    ``classes`` selects the classes averaged into mIoU (all foreground
    classes of the model by default).
    """
    names = list(corruption_names)
    if not names:
        raise ValueError("corruption list is empty")
    sevs = list(severities)
    n_out = model.n_classes
    classes = list(range(1, n_out)) if classes is None else list(classes)
    images = np.stack([s.image for s in test_set])
    masks = np.stack([s.mask for s in test_set])
    clean = _dataset_miou(model, images, masks, classes, n_out, test_set.ignore_index)
    rows = []
    for name in names:
        for sev in sevs:
            spec = CorruptionSpec.resolve(name, sev)
            bad = np.stack([corrupt(img, spec, corruption_seed(seed, name, sev, i)) for i, img in enumerate(images)])
            rows.append((name, sev, _dataset_miou(model, bad, masks, classes, n_out, test_set.ignore_index)))
            logger.debug("%s@%d: %.4f", name, sev, rows[-1][2])
    curve = {0: clean}
    for sev in sevs:
        curve[sev] = float(np.mean([m for n, s, m in rows if s == sev]))
    return RobustnessResult(clean, rows, curve)


def plot_curve(result: RobustnessResult, path, label: str = "model") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sev = sorted(result.curve)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(sev, [100 * result.curve[s] for s in sev], marker="o", label=label)
    ax.set_xlabel("severity")
    ax.set_ylabel("mIoU (%)")
    ax.set_xticks(sev)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
