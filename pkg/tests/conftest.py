import numpy as np
import pytest
import torch

from cbns.core import Dataset, LabeledSample, PointCloud

torch.set_num_threads(2)


def random_cloud(rng, n=32, d=3, dtype=np.float32):
    return PointCloud(rng.normal(size=(n, d)).astype(dtype))


def blob_dataset(rng, classes=4, per_class=24, n_points=32, spread=0.15,
                 split="train"):
    """Linearly separable toy data: one Gaussian blob center per class.

    Task and sensitive labels coincide, which is all the single-classifier
    sanity tests need.
    """
    centers = np.array([[2, 0, 0], [-2, 0, 0], [0, 2, 0], [0, -2, 0],
                        [0, 0, 2], [0, 0, -2]])[:classes]
    samples = []
    for c in range(classes):
        for _ in range(per_class):
            pts = centers[c] + spread * rng.normal(size=(n_points, 3))
            samples.append(LabeledSample(
                cloud=PointCloud(pts.astype(np.float32)), y_t=c, y_s=c))
    names = tuple(f"c{i}" for i in range(classes))
    return Dataset(tuple(samples), names, names, split)


def two_attr_dataset(rng, n_points=48, per_cell=6, split="train"):
    """2 task x 2 sensitive classes, each attribute in its own spatial blob."""
    t_centers = np.array([[3, 0, 0], [-3, 0, 0]])
    s_centers = np.array([[0, 3, 0], [0, -3, 0]])
    samples = []
    half = n_points // 2
    for y_t in range(2):
        for y_s in range(2):
            for _ in range(per_cell):
                a = t_centers[y_t] + 0.3 * rng.normal(size=(half, 3))
                b = s_centers[y_s] + 0.3 * rng.normal(size=(n_points - half, 3))
                pts = np.concatenate([a, b]).astype(np.float32)
                samples.append(LabeledSample(cloud=PointCloud(pts), y_t=y_t, y_s=y_s))
    return Dataset(tuple(samples), ("t0", "t1"), ("s0", "s1"), split)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at numpy array x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
