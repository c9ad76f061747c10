"""Datasets: synthetic image-like clusters, MNIST IDX files, partitioning, triggers."""

from __future__ import annotations

import gzip
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapabilityError, ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
BLOB_MAGIC = b"VFDS1"
CORNERS = ("bottom_right", "bottom_left", "top_right", "top_left")


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ConfigError(f"inconsistent dataset shapes x={x.shape} y={y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(x)):
            raise ConfigError("dataset features contain NaN/Inf")
        if self.image_shape is not None:
            shape = tuple(int(s) for s in self.image_shape)
            if len(shape) != 3 or math.prod(shape) != x.shape[1]:
                raise ConfigError(f"image shape {shape} does not match feature dim {x.shape[1]}")
            object.__setattr__(self, "image_shape", shape)
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.class_count, self.image_shape)

    def with_labels(self, y) -> "Dataset":
        return Dataset(self.x, np.asarray(y), self.class_count, self.image_shape)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.class_count != self.class_count or other.feature_dim != self.feature_dim:
            raise ConfigError("cannot concatenate datasets with different shapes")
        return Dataset(
            np.vstack([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            self.class_count,
            self.image_shape,
        )


def _square_shape(d: int):
    side = math.isqrt(d)
    return (side, side, 1) if side * side == d else None


def _synthetic_centers(class_count, feature_dim, seed, rare_clusters_per_class, rare_shift):
    rng = np.random.default_rng([seed, 0])
    centers = rng.uniform(0.0, 0.6, size=(class_count, feature_dim))
    rare = centers[:, None, :] + rng.normal(
        0.0, rare_shift, size=(class_count, rare_clusters_per_class, feature_dim)
    )
    return centers, rare


def _synthetic_draw(centers, rare, per_class, spread, rare_fraction, rng):
    class_count, feature_dim = centers.shape
    n_rare = int(round(per_class * rare_fraction))
    xs, ys = [], []
    for c in range(class_count):
        base = centers[c] + rng.normal(0.0, spread, size=(per_class - n_rare, feature_dim))
        which = rng.integers(0, rare.shape[1], size=n_rare)
        odd = rare[c, which] + rng.normal(0.0, spread, size=(n_rare, feature_dim))
        xs.append(np.vstack([base, odd]))
        ys.append(np.full(per_class, c))
    return np.vstack(xs), np.concatenate(ys)


def gen_synthetic(
    class_count: int,
    feature_dim: int,
    per_class: int,
    cluster_spread: float = 0.15,
    rare_cluster_fraction: float = 0.05,
    seed: int = 0,
    *,
    rare_clusters_per_class: int = 2,
    rare_shift: float = 0.35,
    image_shape=None,
) -> Dataset:
    """Gaussian class clusters with a fraction of samples from displaced sub-clusters.

    Class centres are uniform in [0, 0.6] per feature so the data looks like
    dim greyscale images; a trigger patch at 1.0 therefore stands out.  When
    ``feature_dim`` is a perfect square the dataset is tagged as a
    single-channel square image.
    """
    train, _ = gen_synthetic_split(
        class_count,
        feature_dim,
        per_class,
        0,
        cluster_spread,
        rare_cluster_fraction,
        seed,
        rare_clusters_per_class=rare_clusters_per_class,
        rare_shift=rare_shift,
        image_shape=image_shape,
    )
    return train


def gen_synthetic_split(
    class_count: int,
    feature_dim: int,
    per_class: int,
    test_per_class: int,
    cluster_spread: float = 0.15,
    rare_cluster_fraction: float = 0.05,
    seed: int = 0,
    *,
    rare_clusters_per_class: int = 2,
    rare_shift: float = 0.35,
    image_shape=None,
) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn around the same class centres."""
    if min(class_count, feature_dim, per_class) <= 0 or test_per_class < 0:
        raise ConfigError("class_count, feature_dim and per_class must be positive")
    if cluster_spread <= 0:
        raise ConfigError("cluster_spread must be positive")
    if not 0.0 <= rare_cluster_fraction < 1.0:
        raise ConfigError("rare_cluster_fraction must be in [0, 1)")
    shape = image_shape if image_shape is not None else _square_shape(feature_dim)
    centers, rare = _synthetic_centers(
        class_count, feature_dim, seed, rare_clusters_per_class, rare_shift
    )
    x, y = _synthetic_draw(
        centers, rare, per_class, cluster_spread, rare_cluster_fraction,
        np.random.default_rng([seed, 1]),
    )
    train = Dataset(x, y, class_count, shape)
    if test_per_class == 0:
        test = Dataset(np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64), class_count, shape)
    else:
        xt, yt = _synthetic_draw(
            centers, rare, test_per_class, cluster_spread, rare_cluster_fraction,
            np.random.default_rng([seed, 2]),
        )
        test = Dataset(xt, yt, class_count, shape)
    return train, test


# --- IDX (MNIST) -----------------------------------------------------------


def _open_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for IDX magic", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{what}: mismatched magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{what}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = math.prod(dims)
    if len(raw) < header_end + count:
        raise FormatError(
            f"{what}: truncated payload, expected {count} bytes of data", offset=len(raw)
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (1-D labels or 3-D images)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, downscale: bool = False) -> Dataset:
    images = _parse_idx(_open_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_open_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    x = images.astype(np.float64) / 255.0
    if downscale:
        n, h, w = x.shape
        x = x[:, : h - h % 2, : w - w % 2].reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    n, h, w = x.shape
    y = labels.astype(np.int64)
    class_count = max(10, int(y.max()) + 1) if len(y) else 10
    return Dataset(x.reshape(n, h * w), y, class_count, (h, w, 1))


# --- binary cache ----------------------------------------------------------


def dataset_to_bytes(ds: Dataset) -> bytes:
    shape = ds.image_shape or (0, 0, 0)
    header = BLOB_MAGIC + struct.pack("<6I", ds.class_count, ds.feature_dim, len(ds), *shape)
    return header + ds.x.astype("<f8").tobytes() + ds.y.astype("<i4").tobytes()


def dataset_from_bytes(raw: bytes) -> Dataset:
    if raw[:5] != BLOB_MAGIC:
        raise FormatError("not a dataset blob (bad magic)", offset=0)
    hsize = 5 + 24
    if len(raw) < hsize:
        raise FormatError("truncated dataset header", offset=len(raw))
    c, d, n, h, w, ch = struct.unpack("<6I", raw[5:hsize])
    need = hsize + n * d * 8 + n * 4
    if len(raw) < need:
        raise FormatError("truncated dataset payload", offset=len(raw))
    x = np.frombuffer(raw, dtype="<f8", count=n * d, offset=hsize).reshape(n, d)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=hsize + n * d * 8)
    shape = (h, w, ch) if h else None
    return Dataset(x.astype(np.float64), y.astype(np.int64), c, shape)


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


# --- partitioning ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    n: int
    _blocks: list = field(default=None, repr=False)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if len(a) and (a.min() < 0 or a.max() >= self.n):
            raise ConfigError("assignment outside [0, n)")
        a.flags.writeable = False
        object.__setattr__(self, "assignment", a)
        object.__setattr__(
            self, "_blocks", [np.flatnonzero(a == i) for i in range(self.n)]
        )

    def indices(self, participant: int) -> np.ndarray:
        return self._blocks[participant]

    def sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self._blocks])


def _sample_count(data) -> int:
    return len(data) if not isinstance(data, (int, np.integer)) else int(data)


def partition_iid(data, n: int, seed: int) -> Partition:
    """Shuffled equal split; block sizes differ by at most one."""
    total = _sample_count(data)
    if n <= 0:
        raise ConfigError("participant count must be positive")
    if n > total:
        raise ConfigError(f"cannot split {total} samples across {n} participants")
    order = np.random.default_rng([seed, 11]).permutation(total)
    assignment = np.empty(total, dtype=np.int64)
    for i, block in enumerate(np.array_split(order, n)):
        assignment[block] = i
    return Partition(assignment, n)


def partition_dirichlet(dataset: Dataset, n: int, alpha: float, seed: int,
                        max_tries: int = 100) -> Partition:
    """Per-class Dirichlet(alpha) split over participants.

    Draws that leave a participant empty are redrawn.
    """
    if n <= 0:
        raise ConfigError("participant count must be positive")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if n > len(dataset):
        raise ConfigError(f"cannot split {len(dataset)} samples across {n} participants")
    rng = np.random.default_rng([seed, 12])
    for _ in range(max_tries):
        assignment = np.empty(len(dataset), dtype=np.int64)
        for c in range(dataset.class_count):
            idx = rng.permutation(np.flatnonzero(dataset.y == c))
            if len(idx) == 0:
                continue
            props = rng.dirichlet(np.full(n, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).round().astype(int)
            for i, block in enumerate(np.split(idx, cuts)):
                assignment[block] = i
        if np.all(np.bincount(assignment, minlength=n) > 0):
            return Partition(assignment, n)
    raise ConfigError(
        f"could not draw a Dirichlet partition with every participant non-empty "
        f"after {max_tries} tries (alpha={alpha}, n={n})"
    )


# --- triggers --------------------------------------------------------------


@dataclass(frozen=True)
class TriggerSpec:
    size: int = 5
    transparency: float = 0.0
    position: str = "bottom_right"
    target_class: int = 0
    poison_ratio: float = 0.5

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("trigger size must be at least 1")
        if not 0.0 <= self.transparency <= 1.0:
            raise ConfigError("transparency must be in [0, 1]")
        if self.position not in CORNERS:
            raise ConfigError(f"unknown trigger position {self.position!r}")
        if not 0.0 <= self.poison_ratio <= 1.0:
            raise ConfigError("poison_ratio must be in [0, 1]")

    def mask(self, image_shape) -> np.ndarray:
        if image_shape is None:
            raise CapabilityError("triggers need image-shaped data")
        h, w, ch = image_shape
        if self.size > h or self.size > w:
            raise ConfigError(f"trigger of size {self.size} exceeds a {h}x{w} image")
        m = np.zeros((h, w, ch), dtype=bool)
        rows = slice(h - self.size, h) if self.position.startswith("bottom") else slice(0, self.size)
        cols = slice(w - self.size, w) if self.position.endswith("right") else slice(0, self.size)
        m[rows, cols, :] = True
        return m.reshape(-1)


def apply_trigger(x: np.ndarray, trigger: TriggerSpec, image_shape) -> np.ndarray:
    """Blend a white square into flat image(s); labels are left alone."""
    x = np.array(x, dtype=np.float64, copy=True)
    m = trigger.mask(image_shape)
    if x.shape[-1] != m.shape[0]:
        raise ConfigError("sample does not match the image shape")
    t = trigger.transparency
    x[..., m] = (1.0 - t) * 1.0 + t * x[..., m]
    return x


def total_variation_from_global(dataset: Dataset, partition: Partition) -> float:
    """Mean total-variation distance between each block's class mix and the global mix."""
    glob = dataset.class_histogram() / len(dataset)
    tvs = []
    for i in range(partition.n):
        hist = np.bincount(dataset.y[partition.indices(i)], minlength=dataset.class_count)
        tvs.append(0.5 * np.abs(hist / hist.sum() - glob).sum())
    return float(np.mean(tvs))
