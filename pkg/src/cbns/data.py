"""Dataset ingestion and generation.

Two sources feed the toolkit: OFF meshes laid out in the usual
class/{train,test}/*.off directory structure (surface-sampled into clouds,
with a living/non-living super-type as the task label and the object class as
the sensitive label), and a controllable synthetic generator whose overlap
knob delta sets what fraction of each cloud jointly encodes both attributes.

Datasets persist as a directory: manifest.json plus one binary blob per
split — little-endian float32 coordinates in sample-major row-major order
followed by two uint16 label arrays (all y_t, then all y_s).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import pathlib

import numpy as np

from .core import (Dataset, IntegrityError, LabeledSample, PointCloud,
                   RandomStream, normalize_cloud)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "cbns-dataset-v1"

#: Default ModelNet quartet: 2 living, 2 non-living object classes.
MODELNET_CLASSES = ("person", "plant", "sofa", "bed")
MODELNET_LIVING = ("person", "plant")


class OffParseError(ValueError):
    """Malformed OFF input; message carries the 1-based line number."""


@dataclasses.dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of vertex range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    c_t: int = 4
    c_s: int = 4
    n: int = 512
    overlap: float = 0.0      # delta: fraction of points encoding both labels
    noise_floor: float = 0.02
    samples_per_pair: int = 25
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if min(self.c_t, self.c_s, self.n, self.samples_per_pair) < 1:
            raise ValueError("all counts must be >= 1")


# ---------------------------------------------------------------------------
# OFF meshes

def parse_off(text: str) -> TriangleMesh:
    """Parse OFF text; polygons beyond triangles are fan-triangulated from
    their first vertex."""
    lines = text.splitlines()

    def tokens():
        for lineno, raw in enumerate(lines, start=1):
            stripped = raw.split("#", 1)[0].strip()
            if stripped:
                yield lineno, stripped

    it = tokens()
    try:
        lineno, header = next(it)
    except StopIteration:
        raise OffParseError("line 1: empty OFF input") from None
    counts_inline = None
    if header == "OFF":
        pass
    elif header.startswith("OFF"):
        counts_inline = (lineno, header[3:].strip())  # tolerated glued header
    else:
        raise OffParseError(f"line {lineno}: expected 'OFF' header, got {header!r}")

    if counts_inline is None:
        try:
            lineno, counts_line = next(it)
        except StopIteration:
            raise OffParseError("missing counts line") from None
    else:
        lineno, counts_line = counts_inline
    parts = counts_line.split()
    if len(parts) != 3:
        raise OffParseError(f"line {lineno}: counts line must be 'V F E', got {counts_line!r}")
    try:
        n_v, n_f, _ = (int(p) for p in parts)
    except ValueError:
        raise OffParseError(f"line {lineno}: non-integer counts {counts_line!r}") from None

    vertices = np.empty((n_v, 3), dtype=np.float64)
    for i in range(n_v):
        try:
            lineno, line = next(it)
        except StopIteration:
            raise OffParseError(f"expected {n_v} vertex lines, got {i}") from None
        parts = line.split()
        if len(parts) < 3:
            raise OffParseError(f"line {lineno}: vertex needs 3 coordinates")
        try:
            vertices[i] = [float(p) for p in parts[:3]]
        except ValueError:
            raise OffParseError(f"line {lineno}: bad vertex {line!r}") from None

    faces: list = []
    for i in range(n_f):
        try:
            lineno, line = next(it)
        except StopIteration:
            raise OffParseError(f"expected {n_f} face lines, got {i}") from None
        parts = line.split()
        try:
            k = int(parts[0])
            idx = [int(p) for p in parts[1:1 + k]]
        except (ValueError, IndexError):
            raise OffParseError(f"line {lineno}: bad face {line!r}") from None
        if len(idx) != k or k < 3:
            raise OffParseError(f"line {lineno}: face lists {len(idx)} of {k} indices")
        if any(j < 0 or j >= n_v for j in idx):
            raise OffParseError(f"line {lineno}: face index out of range")
        for a, b in zip(idx[1:-1], idx[2:]):
            faces.append((idx[0], a, b))

    return TriangleMesh(vertices=vertices,
                        faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


def emit_off(mesh: TriangleMesh) -> str:
    """Inverse of parse_off for triangle meshes."""
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    for v in mesh.vertices:
        out.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for f in mesh.faces:
        out.append(f"3 {f[0]} {f[1]} {f[2]}")
    return "\n".join(out) + "\n"


def _face_areas(mesh: TriangleMesh) -> np.ndarray:
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> PointCloud:
    """n points area-uniform on the mesh surface, then unit-sphere normalized.

    Faces are chosen with probability proportional to area; the point within a
    face comes from a uniform barycentric draw (u, v folded so u + v <= 1).
    """
    areas = _face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total surface area")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return normalize_cloud(PointCloud(pts.astype(np.float32)))


def load_modelnet_subset(root, classes=MODELNET_CLASSES, living=MODELNET_LIVING,
                         n: int = 2048, seed: int = 0) -> tuple:
    """Load a 4-class ModelNet-style tree into (train, test) datasets.

    Task label: super-type (living / non-living). Sensitive label: the object
    class itself. Each mesh gets its own substream so loading order (or
    parallel fan-out) cannot change the sampled clouds.
    """
    root = pathlib.Path(root)
    classes = tuple(classes)
    living = set(living)
    task_classes = ("living", "non-living")
    stream = RandomStream(seed)

    mesh_files: list = []
    for cls in classes:
        for split in ("train", "test"):
            split_dir = root / cls / split
            if not split_dir.is_dir():
                raise FileNotFoundError(
                    f"expected ModelNet layout {root}/<class>/<train|test>/*.off; "
                    f"missing {split_dir}")
            for path in sorted(split_dir.glob("*.off")):
                mesh_files.append((cls, split, path))

    buckets = {"train": [], "test": []}
    for mesh_index, (cls, split, path) in enumerate(mesh_files):
        mesh = parse_off(path.read_text())
        cloud = sample_surface(mesh, n, stream.substream("data", mesh_index))
        y_s = classes.index(cls)
        y_t = 0 if cls in living else 1
        buckets[split].append(LabeledSample(cloud=cloud, y_t=y_t, y_s=y_s))

    train = Dataset(tuple(buckets["train"]), task_classes, classes, "train")
    test = Dataset(tuple(buckets["test"]), task_classes, classes, "test")
    return train, test


# ---------------------------------------------------------------------------
# Synthetic two-attribute generator

_N_ARCHETYPES = 4

_TASK_CENTER = np.array([-2.0, 0.0, 0.0])
_SENS_CENTER = np.array([2.0, 0.0, 0.0])
_OVERLAP_CENTER = np.array([0.0, 2.0, 0.0])
_REGION_SCALE = 0.8


def _archetype(index: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points on one of four shape archetypes, centered at the origin."""
    if index == 0:  # sphere surface
        dirs = rng.normal(size=(count, 3))
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    if index == 1:  # solid cube
        return rng.uniform(-1.0, 1.0, size=(count, 3))
    if index == 2:  # flat ring
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        pts = np.stack([np.cos(theta), np.sin(theta), np.zeros(count)], axis=1)
        return pts + 0.1 * rng.normal(size=(count, 3))
    if index == 3:  # two lobes
        side = rng.integers(0, 2, size=count) * 2 - 1
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = 0.35 * dirs
        pts[:, 0] += 0.65 * side
        return pts
    raise ValueError(f"no archetype {index}")


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def synth_region_sizes(config: SynthConfig) -> tuple:
    """(task, sensitive, overlap) point counts; points are laid out in that
    block order within each generated cloud."""
    n_overlap = int(round(config.overlap * config.n))
    rest = config.n - n_overlap
    n_task = (rest + 1) // 2
    n_sens = rest - n_task
    return n_task, n_sens, n_overlap


def _synth_cloud(config: SynthConfig, y_t: int, y_s: int,
                 rng: np.random.Generator) -> PointCloud:
    n_task, n_sens, n_overlap = synth_region_sizes(config)
    blocks = []
    if n_task:
        blocks.append(_TASK_CENTER +
                      _REGION_SCALE * _archetype(y_t, n_task, rng))
    if n_sens:
        blocks.append(_SENS_CENTER +
                      _REGION_SCALE * _archetype(y_s, n_sens, rng))
    if n_overlap:
        # shape carries the task label; scale and orientation carry the
        # sensitive label, so this region genuinely encodes both
        shape = _archetype(y_t, n_overlap, rng)
        scale = 0.6 + 0.4 * (y_s / max(1, config.c_s - 1))
        angle = 2.0 * np.pi * y_s / config.c_s
        blocks.append(_OVERLAP_CENTER +
                      _REGION_SCALE * scale * shape @ _rot_z(angle).T)
    pts = np.concatenate(blocks, axis=0)
    pts = pts + config.noise_floor * rng.normal(size=pts.shape)
    return normalize_cloud(PointCloud(pts.astype(np.float32)))


def synth_generate(config: SynthConfig) -> tuple:
    """Balanced synthetic (train, test) datasets.

    Every (y_t, y_s) pair gets samples_per_pair clouds, split per pair by
    train_fraction. At overlap 0 the attributes live in spatially disjoint
    regions, so an ideal censor exists; overlap near 1 forces a real
    privacy-utility trade-off.
    """
    if max(config.c_t, config.c_s) > _N_ARCHETYPES:
        raise ValueError(
            f"only {_N_ARCHETYPES} shape archetypes available; "
            f"cannot encode {max(config.c_t, config.c_s)} classes")
    stream = RandomStream(config.seed)
    task_classes = tuple(f"task-{i}" for i in range(config.c_t))
    sens_classes = tuple(f"sensitive-{i}" for i in range(config.c_s))

    n_train_per_pair = int(round(config.train_fraction * config.samples_per_pair))
    n_train_per_pair = min(max(n_train_per_pair, 1), config.samples_per_pair)

    train_samples: list = []
    test_samples: list = []
    sample_index = 0
    for y_t in range(config.c_t):
        for y_s in range(config.c_s):
            for j in range(config.samples_per_pair):
                rng = stream.substream("data", sample_index)
                sample_index += 1
                cloud = _synth_cloud(config, y_t, y_s, rng)
                sample = LabeledSample(cloud=cloud, y_t=y_t, y_s=y_s)
                (train_samples if j < n_train_per_pair else test_samples).append(sample)

    train = Dataset(tuple(train_samples), task_classes, sens_classes, "train")
    if not test_samples:
        raise ValueError("samples_per_pair too small to leave a test split")
    test = Dataset(tuple(test_samples), task_classes, sens_classes, "test")
    return train, test


# ---------------------------------------------------------------------------
# Persistence

def _blob_path(root: pathlib.Path, split: str) -> pathlib.Path:
    return root / f"{split}.bin"


def save_dataset(path, *datasets, seed: int | None = None,
                 provenance: dict | None = None) -> None:
    """Write datasets (one per split) into a directory with a manifest."""
    if not datasets:
        raise ValueError("need at least one dataset to save")
    root = pathlib.Path(path)
    root.mkdir(parents=True, exist_ok=True)
    first = datasets[0]
    splits = {}
    for ds in datasets:
        if ds.split in splits:
            raise ValueError(f"duplicate split {ds.split!r}")
        if (ds.n, ds.d) != (first.n, first.d):
            raise ValueError("all splits must share (n, d)")
        if (ds.task_classes, ds.sensitive_classes) != (first.task_classes,
                                                       first.sensitive_classes):
            raise ValueError("all splits must share class names")
        splits[ds.split] = len(ds)
        coords = ds.clouds(np.float32).astype("<f4")
        y_t = ds.task_labels().astype("<u2")
        y_s = ds.sensitive_labels().astype("<u2")
        with open(_blob_path(root, ds.split), "wb") as f:
            f.write(coords.tobytes())
            f.write(y_t.tobytes())
            f.write(y_s.tobytes())
    manifest = {
        "format": DATASET_FORMAT,
        "n": first.n,
        "d": first.d,
        "task_classes": list(first.task_classes),
        "sensitive_classes": list(first.sensitive_classes),
        "splits": splits,
        "seed": seed,
        "provenance": provenance,
    }
    tmp = root / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    tmp.replace(root / MANIFEST_NAME)


def load_manifest(path) -> dict:
    root = pathlib.Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise IntegrityError(f"no {MANIFEST_NAME} in {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != DATASET_FORMAT:
        raise IntegrityError(f"unrecognized dataset format in {manifest_path}")
    return manifest


def load_dataset(path, split: str = "train") -> Dataset:
    """Load one split back; byte-exact inverse of save_dataset."""
    root = pathlib.Path(path)
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise IntegrityError(f"split {split!r} not present in {root}; "
                             f"manifest lists {sorted(manifest['splits'])}")
    count = manifest["splits"][split]
    n, d = manifest["n"], manifest["d"]
    coord_bytes = count * n * d * 4
    label_bytes = count * 2
    blob = _blob_path(root, split).read_bytes()
    expected = coord_bytes + 2 * label_bytes
    if len(blob) != expected:
        raise IntegrityError(
            f"{_blob_path(root, split)}: expected {expected} bytes "
            f"({count} samples of {n}x{d}), found {len(blob)}")
    coords = np.frombuffer(blob, dtype="<f4", count=count * n * d)
    coords = coords.reshape(count, n, d)
    y_t = np.frombuffer(blob, dtype="<u2", count=count, offset=coord_bytes)
    y_s = np.frombuffer(blob, dtype="<u2", count=count,
                        offset=coord_bytes + label_bytes)
    if y_t.size and int(y_t.max()) >= len(manifest["task_classes"]):
        raise IntegrityError(f"task label out of range in {root}")
    if y_s.size and int(y_s.max()) >= len(manifest["sensitive_classes"]):
        raise IntegrityError(f"sensitive label out of range in {root}")
    samples = tuple(
        LabeledSample(cloud=PointCloud(np.array(coords[i], dtype=np.float32)),
                      y_t=int(y_t[i]), y_s=int(y_s[i]))
        for i in range(count))
    return Dataset(samples, tuple(manifest["task_classes"]),
                   tuple(manifest["sensitive_classes"]), split)
