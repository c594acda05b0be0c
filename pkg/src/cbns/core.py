"""Core domain types: point clouds, labeled datasets, and seeded random streams.

Everything here is plain numpy and immutable after construction, so the types
are safe to share across workers. Autodiff-facing code lives in the net and
geometry modules.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

log = logging.getLogger(__name__)

#: Registered substream names. Each name owns an independent random stream so
#: that, e.g., re-seeding the attacker never perturbs the noise draws.
SUBSTREAMS = (
    "data",
    "sampler-init",
    "distorter-init",
    "noise-draw",
    "pair-pick",
    "attacker-init",
    "user-init",
)
_SUBSTREAM_IDS = {name: i for i, name in enumerate(SUBSTREAMS)}

_SEED_MASK = (1 << 64) - 1


class ZeroSpreadError(ValueError):
    """Degenerate cloud: all points identical, normalization undefined."""


class IntegrityError(RuntimeError):
    """Persisted artifact is inconsistent with its manifest."""


@dataclasses.dataclass(frozen=True)
class RandomStream:
    """Root of all randomness for one run.

    Substreams are derived from (seed, name, index) so draws are bit-identical
    across runs and independent across names. A substream is owned by exactly
    one consumer; never share a generator across workers.
    """

    seed: int

    def substream(self, name: str, index: int = 0) -> np.random.Generator:
        if name not in _SUBSTREAM_IDS:
            raise KeyError(f"unknown substream {name!r}; expected one of {SUBSTREAMS}")
        seq = np.random.SeedSequence(
            entropy=self.seed & _SEED_MASK,
            spawn_key=(_SUBSTREAM_IDS[name], index),
        )
        return np.random.default_rng(seq)

    def derive_seed(self, name: str, index: int = 0) -> int:
        """A 63-bit child seed, for handing off to an independent RandomStream."""
        return int(self.substream(name, index).integers(0, 1 << 63))


@dataclasses.dataclass(frozen=True)
class PointCloud:
    """An unordered set of n points with d real coordinates each."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2:
            raise ValueError(f"points must be an n×d matrix, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", np.ascontiguousarray(pts))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclasses.dataclass(frozen=True)
class LabeledSample:
    """A point cloud with its task label y_t and sensitive label y_s."""

    cloud: PointCloud
    y_t: int
    y_s: int


@dataclasses.dataclass(frozen=True)
class Dataset:
    """An ordered collection of labeled clouds sharing one (n, d) shape."""

    samples: tuple
    task_classes: tuple
    sensitive_classes: tuple
    split: str

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "task_classes", tuple(self.task_classes))
        object.__setattr__(self, "sensitive_classes", tuple(self.sensitive_classes))
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if not self.samples:
            raise ValueError("dataset must contain at least one sample")
        n, d = self.samples[0].cloud.n, self.samples[0].cloud.d
        for i, s in enumerate(self.samples):
            if (s.cloud.n, s.cloud.d) != (n, d):
                raise ValueError(
                    f"sample {i} has shape ({s.cloud.n}, {s.cloud.d}), expected ({n}, {d})"
                )
            if not 0 <= s.y_t < len(self.task_classes):
                raise ValueError(f"sample {i}: task label {s.y_t} out of range")
            if not 0 <= s.y_s < len(self.sensitive_classes):
                raise ValueError(f"sample {i}: sensitive label {s.y_s} out of range")
        if self.split == "train":
            seen_t = {s.y_t for s in self.samples}
            seen_s = {s.y_s for s in self.samples}
            if len(seen_t) < len(self.task_classes) or len(seen_s) < len(self.sensitive_classes):
                raise ValueError("every declared class must appear in the train split")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n(self) -> int:
        return self.samples[0].cloud.n

    @property
    def d(self) -> int:
        return self.samples[0].cloud.d

    def clouds(self, dtype=np.float32) -> np.ndarray:
        """All clouds stacked into an (N, n, d) array."""
        return np.stack([s.cloud.points for s in self.samples]).astype(dtype, copy=False)

    def task_labels(self) -> np.ndarray:
        return np.array([s.y_t for s in self.samples], dtype=np.int64)

    def sensitive_labels(self) -> np.ndarray:
        return np.array([s.y_s for s in self.samples], dtype=np.int64)

    def replace_clouds(self, clouds, split: str | None = None) -> "Dataset":
        """Same labels and class names over a new list of clouds."""
        if len(clouds) != len(self.samples):
            raise ValueError("cloud count must match sample count")
        samples = tuple(
            LabeledSample(cloud=c, y_t=s.y_t, y_s=s.y_s)
            for c, s in zip(clouds, self.samples)
        )
        return Dataset(samples, self.task_classes, self.sensitive_classes,
                       split if split is not None else self.split)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1.

    Idempotent up to float rounding. Raises ZeroSpreadError when all points
    coincide, since downstream soft projection divides by neighbor distances.
    """
    pts = cloud.points.astype(np.float64)
    centered = pts - pts.mean(axis=0)
    radius = float(np.sqrt((centered ** 2).sum(axis=1).max()))
    if radius < 1e-12:
        raise ZeroSpreadError("cloud has zero spread; cannot normalize")
    return PointCloud((centered / radius).astype(cloud.points.dtype))


def split_dataset(dataset: Dataset, train_fraction: float, rng) -> tuple:
    """Deterministic stratified split by (y_t, y_s) cell.

    Cells with fewer than 2 samples go wholly to train (with a warning).
    Returns (train, test); disjoint, union equals the input.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be strictly between 0 and 1")
    gen = rng.substream("data") if isinstance(rng, RandomStream) else rng

    cells: dict = {}
    for i, s in enumerate(dataset.samples):
        cells.setdefault((s.y_t, s.y_s), []).append(i)

    train_idx: list = []
    test_idx: list = []
    for key in sorted(cells):
        members = cells[key]
        if len(members) < 2:
            log.warning("cell %s has %d sample(s); assigning wholly to train", key, len(members))
            train_idx.extend(members)
            continue
        order = gen.permutation(len(members))
        n_train = int(round(train_fraction * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.extend(members[j] for j in order[:n_train])
        test_idx.extend(members[j] for j in order[n_train:])

    train_idx.sort()
    test_idx.sort()
    train = Dataset(tuple(dataset.samples[i] for i in train_idx),
                    dataset.task_classes, dataset.sensitive_classes, "train")
    test = Dataset(tuple(dataset.samples[i] for i in test_idx),
                   dataset.task_classes, dataset.sensitive_classes, "test")
    return train, test
