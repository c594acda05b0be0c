import numpy as np
import pytest

from cbns.core import (Dataset, LabeledSample, PointCloud, RandomStream,
                       ZeroSpreadError, normalize_cloud, split_dataset)

from conftest import random_cloud


def test_pointcloud_rejects_nonfinite():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, np.nan]]))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.inf, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))


def test_normalize_two_point_cloud():
    cloud = PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    out = normalize_cloud(cloud)
    np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]], atol=1e-7)


def test_normalize_idempotent(rng):
    cloud = random_cloud(rng, n=50)
    once = normalize_cloud(cloud)
    twice = normalize_cloud(once)
    np.testing.assert_allclose(once.points, twice.points, atol=1e-6)


def test_normalize_max_norm_over_random_draws(rng):
    for _ in range(100):
        n = int(rng.integers(2, 64))
        out = normalize_cloud(random_cloud(rng, n=n))
        norms = np.linalg.norm(out.points, axis=1)
        assert abs(norms.max() - 1.0) <= 1e-6
        np.testing.assert_allclose(out.points.mean(axis=0), 0.0, atol=1e-6)


def test_normalize_rejects_zero_spread():
    cloud = PointCloud(np.ones((5, 3)))
    with pytest.raises(ZeroSpreadError):
        normalize_cloud(cloud)


def test_normalize_permutation_equivariant(rng):
    cloud = random_cloud(rng, n=40)
    perm = rng.permutation(40)
    direct = normalize_cloud(PointCloud(cloud.points[perm])).points
    permuted = normalize_cloud(cloud).points[perm]
    np.testing.assert_array_equal(direct, permuted)


def test_random_stream_reproducible():
    a = RandomStream(seed=42).substream("noise-draw").standard_normal(16)
    b = RandomStream(seed=42).substream("noise-draw").standard_normal(16)
    np.testing.assert_array_equal(a, b)


def test_random_stream_substreams_independent():
    s = RandomStream(seed=42)
    draws = {name: s.substream(name).standard_normal(8)
             for name in ("data", "noise-draw", "pair-pick")}
    assert not np.array_equal(draws["data"], draws["noise-draw"])
    assert not np.array_equal(draws["noise-draw"], draws["pair-pick"])
    # indexed substreams differ from index 0
    a = s.substream("noise-draw", 0).standard_normal(8)
    b = s.substream("noise-draw", 1).standard_normal(8)
    assert not np.array_equal(a, b)


def test_random_stream_rejects_unknown_name():
    with pytest.raises(KeyError):
        RandomStream(seed=1).substream("nope")


def _single_cell_dataset(rng, count=10):
    samples = tuple(
        LabeledSample(cloud=random_cloud(rng, n=8), y_t=0, y_s=0)
        for _ in range(count))
    return Dataset(samples, ("t0",), ("s0",), "train")


def test_split_counts_arithmetic(rng):
    ds = _single_cell_dataset(rng, count=10)
    train, test = split_dataset(ds, 0.8, RandomStream(0))
    assert len(train) == 8 and len(test) == 2


def test_split_deterministic(rng):
    ds = _single_cell_dataset(rng, count=10)
    a = split_dataset(ds, 0.8, RandomStream(7))
    b = split_dataset(ds, 0.8, RandomStream(7))
    for x, y in zip(a[0].samples, b[0].samples):
        np.testing.assert_array_equal(x.cloud.points, y.cloud.points)


def test_split_stratified_per_cell(rng):
    # 4 task x 2 sensitive balanced grid, 10 per cell -> every cell 8/2
    samples = []
    for y_t in range(4):
        for y_s in range(2):
            for _ in range(10):
                samples.append(LabeledSample(cloud=random_cloud(rng, n=8),
                                             y_t=y_t, y_s=y_s))
    ds = Dataset(tuple(samples), ("a", "b", "c", "d"), ("x", "y"), "train")
    train, test = split_dataset(ds, 0.8, RandomStream(3))

    def cell_counts(d):
        counts = {}
        for s in d.samples:
            counts[(s.y_t, s.y_s)] = counts.get((s.y_t, s.y_s), 0) + 1
        return counts

    assert all(v == 8 for v in cell_counts(train).values())
    assert all(v == 2 for v in cell_counts(test).values())


def test_split_disjoint_union(rng):
    ds = _single_cell_dataset(rng, count=13)
    train, test = split_dataset(ds, 0.7, RandomStream(5))
    assert len(train) + len(test) == len(ds)
    seen = [tuple(s.cloud.points.ravel()) for s in train.samples + test.samples]
    orig = [tuple(s.cloud.points.ravel()) for s in ds.samples]
    assert sorted(seen) == sorted(orig)


def test_split_singleton_cell_goes_to_train(rng, caplog):
    samples = [LabeledSample(cloud=random_cloud(rng, n=8), y_t=0, y_s=0)
               for _ in range(10)]
    samples.append(LabeledSample(cloud=random_cloud(rng, n=8), y_t=1, y_s=0))
    ds = Dataset(tuple(samples), ("t0", "t1"), ("s0",), "train")
    with caplog.at_level("WARNING"):
        train, test = split_dataset(ds, 0.8, RandomStream(1))
    assert any(s.y_t == 1 for s in train.samples)
    assert not any(s.y_t == 1 for s in test.samples)
    assert "wholly to train" in caplog.text


def test_dataset_validates_labels_and_shapes(rng):
    good = LabeledSample(cloud=random_cloud(rng, n=8), y_t=0, y_s=0)
    bad_label = LabeledSample(cloud=random_cloud(rng, n=8), y_t=5, y_s=0)
    with pytest.raises(ValueError):
        Dataset((good, bad_label), ("t0",), ("s0",), "train")
    bad_shape = LabeledSample(cloud=random_cloud(rng, n=9), y_t=0, y_s=0)
    with pytest.raises(ValueError):
        Dataset((good, bad_shape), ("t0",), ("s0",), "train")


def test_train_split_requires_class_coverage(rng):
    sample = LabeledSample(cloud=random_cloud(rng, n=8), y_t=0, y_s=0)
    with pytest.raises(ValueError):
        Dataset((sample,), ("t0", "t1"), ("s0",), "train")
    # the test split carries no such requirement
    Dataset((sample,), ("t0", "t1"), ("s0",), "test")
