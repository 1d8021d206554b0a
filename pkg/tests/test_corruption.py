import numpy as np
import pytest

from endocss.corruption import (
    CORRUPTIONS,
    OPTIONAL,
    REQUIRED,
    SEVERITY_TABLE,
    CorruptionSpec,
    corrupt,
    corruption_seed,
)


@pytest.fixture
def image():
    rng = np.random.default_rng(0)
    base = np.full((32, 32, 3), 0.5)
    base[8:24, 8:24] = [0.8, 0.3, 0.2]
    return np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1).astype(np.float32)


def test_registry_arity():
    assert len(REQUIRED) == 12 and len(OPTIONAL) == 6
    assert set(CORRUPTIONS) == set(SEVERITY_TABLE) - {"_doc"}
    for name in CORRUPTIONS:
        entry = SEVERITY_TABLE[name]
        assert len(entry["levels"]) == 5
        assert entry["direction"] in ("increasing", "decreasing")
        assert all(entry["strength"] in lvl for lvl in entry["levels"])


def test_strength_monotone_in_table():
    for name in CORRUPTIONS:
        entry = SEVERITY_TABLE[name]
        vals = [lvl[entry["strength"]] for lvl in entry["levels"]]
        step = np.diff(vals)
        assert np.all(step > 0) if entry["direction"] == "increasing" else np.all(step < 0), name


@pytest.mark.parametrize("name", sorted(CORRUPTIONS))
@pytest.mark.parametrize("sev", [1, 5])
def test_shape_range_deterministic(image, name, sev):
    spec = CorruptionSpec.resolve(name, sev)
    a = corrupt(image, spec, corruption_seed(0, name, sev, 0))
    b = corrupt(image, spec, corruption_seed(0, name, sev, 0))
    assert a.shape == image.shape and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert not np.array_equal(a, image)


def test_zero_noise_identity(image):
    out = corrupt(image, CorruptionSpec("gaussian_noise", 1, {"sigma": 0.0}), np.random.default_rng(0))
    assert np.array_equal(out, image)


def test_brightness_monotone():
    gray = np.full((16, 16, 3), 0.5, np.float32)
    means = [corrupt(gray, CorruptionSpec.resolve("brightness", s)).mean() for s in range(1, 6)]
    assert all(b > a for a, b in zip(means, means[1:]))
    assert means[0] > gray.mean()


def test_jpeg_stronger_at_5(image):
    d = [np.abs(corrupt(image, CorruptionSpec.resolve("jpeg_compression", s)) - image).mean() for s in (1, 5)]
    assert d[1] > d[0]


def test_unknown_and_bad_severity(image):
    with pytest.raises(KeyError):
        CorruptionSpec.resolve("fog", 1)
    with pytest.raises(ValueError):
        CorruptionSpec.resolve("brightness", 6)
    with pytest.raises(ValueError):
        corrupt(image, CorruptionSpec("brightness", 0, {"delta": 0.1}))


def test_identity_corruption(image):
    assert np.array_equal(corrupt(image, CorruptionSpec.resolve("identity", 3)), image)
