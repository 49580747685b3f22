import numpy as np
import pytest
import shapely

from noisymix.data import (SHAPES, SyntheticImageSpec, ToyDatasetSpec, gen_synthetic_images, gen_toy_dataset,
                           load_cifar10_binary, star_polygon)
from noisymix.errors import ConfigError, FormatError


# ---- toy star task -----------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(10))
def test_toy_labels_are_roughly_balanced(seed):
    ds = gen_toy_dataset(ToyDatasetSpec(seed=seed))
    assert ds.X.shape == (500, 2)
    assert 0.4 <= ds.y.mean() <= 0.6


def test_noise_free_points_respect_polygon():
    ds = gen_toy_dataset(ToyDatasetSpec(noise_std=0.0, seed=3))
    poly = star_polygon(0.5)
    inside = shapely.contains_xy(poly, ds.X[:, 0], ds.X[:, 1])
    keep = ~ds.in_band
    assert keep.sum() > 400
    assert np.array_equal(inside[keep].astype(int), ds.y[keep])
    # band points are exactly those near the boundary
    dist = shapely.distance(poly.exterior, shapely.points(ds.X))
    assert np.array_equal(ds.in_band, dist < 0.1)


def test_toy_is_deterministic():
    a, b = gen_toy_dataset(ToyDatasetSpec(seed=5)), gen_toy_dataset(ToyDatasetSpec(seed=5))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.X, gen_toy_dataset(ToyDatasetSpec(seed=6)).X)


def test_toy_split_sizes():
    ds = gen_toy_dataset(ToyDatasetSpec(n_samples=100, n_train=30))
    assert len(ds.train[0]) == 30 and len(ds.test[0]) == 70


@pytest.mark.parametrize("kw", [{"n_train": 0}, {"n_train": 500}, {"noise_std": -1.0}, {"scale": 0.0}])
def test_toy_spec_validation(kw):
    with pytest.raises(ConfigError):
        ToyDatasetSpec(**kw)


# ---- synthetic images ------------------------------------------------------------------------
def test_images_are_balanced_and_in_range():
    images, labels = gen_synthetic_images(SyntheticImageSpec(per_class=12, seed=1))
    assert images.shape == (48, 32, 32, 3)
    assert np.array_equal(np.bincount(labels), [12] * len(SHAPES))
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_zero_jitter_gives_one_image_per_class():
    spec = SyntheticImageSpec(per_class=5, position_jitter=0.0, scale_jitter=0.0, color_jitter=0.0, seed=2)
    images, labels = gen_synthetic_images(spec)
    protos = np.stack([images[labels == c][0] for c in range(len(SHAPES))])
    for c in range(len(SHAPES)):
        assert all(np.array_equal(im, protos[c]) for im in images[labels == c])
    # the four prototypes are distinct, so nearest-centroid classification is perfect
    d = ((images.reshape(len(images), 1, -1) - protos.reshape(1, len(SHAPES), -1)) ** 2).sum(axis=2)
    assert np.array_equal(d.argmin(axis=1), labels)


def test_images_are_deterministic():
    a = gen_synthetic_images(SyntheticImageSpec(per_class=3, seed=4))
    b = gen_synthetic_images(SyntheticImageSpec(per_class=3, seed=4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ---- CIFAR-10 binary -----------------------------------------------------------------------------
def test_cifar_two_record_fixture(tmp_path):
    r = np.random.default_rng(0)
    planes = r.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    raw = b"".join(bytes([lab]) + planes[k].tobytes() for k, lab in enumerate((3, 9)))
    (tmp_path / "batch.bin").write_bytes(raw)
    images, labels = load_cifar10_binary(tmp_path / "batch.bin")
    assert labels.tolist() == [3, 9]
    assert images.shape == (2, 32, 32, 3)
    np.testing.assert_array_equal(images[1, 5, 7], planes[1, :, 5, 7] / 255.0)
    np.testing.assert_array_equal(np.round(images * 255).astype(np.uint8).transpose(0, 3, 1, 2), planes)


def test_cifar_empty_file(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    images, labels = load_cifar10_binary(tmp_path / "e.bin")
    assert len(images) == 0 and len(labels) == 0


def test_cifar_truncated(tmp_path):
    (tmp_path / "t.bin").write_bytes(bytes(3073 + 10))
    with pytest.raises(FormatError):
        load_cifar10_binary(tmp_path / "t.bin")


def test_cifar_bad_label(tmp_path):
    (tmp_path / "l.bin").write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(FormatError):
        load_cifar10_binary(tmp_path / "l.bin")
