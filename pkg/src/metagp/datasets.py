"""Synthetic generators, IDX / delimited-text ingestion and pool splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SINUSOID_PERIOD = 2.0
SINUSOID_NOISE = 0.1
TRAIN_INTERVALS = ((-2.0, -0.4), (0.4, 2.0))
INTERP_INTERVAL = (-0.4, 0.4)
EXTRAP_INTERVAL = (2.5, 4.5)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} targets")

    def __len__(self):
        return len(self.x)

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(np.asarray(self.y).dtype, np.integer)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.x_mean, self.x_std, self.y_mean, self.y_std, dict(self.meta))

    def normalized(self, stats_from: "Dataset | None" = None) -> "Dataset":
        """Standardise inputs (and real targets) with statistics of ``stats_from``."""
        ref = stats_from or self
        x_mean = ref.x.mean(0)
        x_std = np.where(ref.x.std(0) > 0, ref.x.std(0), 1.0)
        out = Dataset((self.x - x_mean) / x_std, self.y, x_mean, x_std, meta=dict(self.meta))
        if not self.is_classification:
            y_ref = np.asarray(ref.y, dtype=np.float64)
            out.y_mean = y_ref.mean(0)
            out.y_std = np.where(y_ref.std(0) > 0, y_ref.std(0), 1.0)
            out.y = (np.asarray(self.y, dtype=np.float64) - out.y_mean) / out.y_std
        return out

    def denormalize_x(self, x):
        return x if self.x_mean is None else np.asarray(x) * self.x_std + self.x_mean

    def denormalize_y(self, y):
        return y if self.y_mean is None else np.asarray(y) * self.y_std + self.y_mean

    def to_csv(self, path) -> None:
        y = np.asarray(self.y).reshape(len(self), -1)
        cols = [f"x{i}" for i in range(self.x.shape[1])] + [f"y{i}" for i in range(y.shape[1])]
        np.savetxt(path, np.hstack([self.x, y]), delimiter=",", header=",".join(cols), comments="")


def sinusoid(x, period: float = SINUSOID_PERIOD) -> np.ndarray:
    return np.sin(2 * np.pi * np.asarray(x) / period)


def _uniform_in(rng, intervals, n):
    lengths = np.array([b - a for a, b in intervals])
    which = rng.choice(len(intervals), size=n, p=lengths / lengths.sum())
    lo = np.array([intervals[i][0] for i in which])
    return lo + rng.uniform(size=n) * lengths[which]


def gen_sinusoid(n_train: int = 100, seed: int = 0, n_test: int = 50, noise: float = SINUSOID_NOISE):
    """Train on two intervals around a central gap; test inside the gap and beyond the data.

    Returns (train, interpolation test, extrapolation test).
    """
    if n_train < 2:
        raise ValueError("n_train must be at least 2")
    rng = np.random.default_rng(seed)
    half = n_train // 2
    x_train = np.sort(np.concatenate([
        rng.uniform(*TRAIN_INTERVALS[0], size=half),
        rng.uniform(*TRAIN_INTERVALS[1], size=n_train - half),
    ]))
    x_int = np.sort(rng.uniform(*INTERP_INTERVAL, size=n_test))
    x_ext = np.sort(rng.uniform(*EXTRAP_INTERVAL, size=n_test))

    def make(x):
        y = sinusoid(x) + noise * rng.standard_normal(len(x))
        return Dataset(x[:, None], y[:, None])

    return make(x_train), make(x_int), make(x_ext)


def gen_sinusoid_pool(n: int = 220, seed: int = 0, low: float = -4.0, high: float = 4.0,
                      noise: float = SINUSOID_NOISE) -> Dataset:
    """Sinusoid observed uniformly over a wide range, for pool-based active learning."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(low, high, size=n)
    y = sinusoid(x) + noise * rng.standard_normal(n)
    return Dataset(x[:, None], y[:, None])


FOUR_CLASS_CENTERS = np.array([[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]])


def gen_four_class(n: int = 100, seed: int = 0, std: float = 0.4) -> Dataset:
    """Four Gaussian blobs, one per quadrant, n/4 points each."""
    if n % 4:
        raise ValueError("n must be divisible by 4")
    rng = np.random.default_rng(seed)
    per = n // 4
    y = np.repeat(np.arange(4), per)
    x = FOUR_CLASS_CENTERS[y] + std * rng.standard_normal((n, 2))
    return Dataset(x, y.astype(np.int64))


def gen_noise_ood(kind: str, n: int, shape, seed: int = 0, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Uniform on [low, high] or N(mid, 1) clipped to [low, high]; mid is 0.5 on the unit box."""
    rng = np.random.default_rng(seed)
    shape = (n, *tuple(np.atleast_1d(shape)))
    if kind == "uniform":
        return rng.uniform(low, high, size=shape)
    if kind == "gaussian":
        mid = 0.5 * (low + high)
        return np.clip(rng.normal(mid, 1.0, size=shape), low, high)
    raise ValueError(f"unknown noise kind {kind!r}")


def read_idx(path, expect: str | None = None) -> np.ndarray:
    """Read an IDX file: images (scaled to [0, 1]) or labels (integers).

    ``expect`` ("images" or "labels") rejects a file whose magic names the
    other kind.
    """
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TruncatedFile(f"{path}: header needs 8 bytes, found {len(data)}")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise BadMagic(f"{path}: magic 0x{magic:08x} is neither 0x{IDX_IMAGES:08x} nor 0x{IDX_LABELS:08x}")
    wanted = {"images": IDX_IMAGES, "labels": IDX_LABELS, None: magic}[expect]
    if magic != wanted:
        raise BadMagic(f"{path}: expected {expect} (magic 0x{wanted:08x}), found 0x{magic:08x}")
    ndim = 3 if magic == IDX_IMAGES else 1
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise TruncatedFile(f"{path}: expected {count} data bytes, found {len(data) - header}")
    arr = np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == IDX_IMAGES:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) or labels (n,) in IDX format."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}.get(arr.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx_dataset(images_path, labels_path, limit: int | None = None, seed: int = 0) -> Dataset:
    images = read_idx(images_path, expect="images")
    labels = read_idx(labels_path, expect="labels")
    if len(images) != len(labels):
        raise ValueError("image and label files disagree on the number of examples")
    idx = np.arange(len(images))
    if limit is not None and limit < len(images):
        idx = np.sort(np.random.default_rng(seed).choice(len(images), size=limit, replace=False))
    return Dataset(images[idx].reshape(len(idx), -1), labels[idx])


def load_delimited(path, delimiter: str | None = None) -> Dataset:
    """Headerless numeric table, target in the last column."""
    table = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    return Dataset(table[:, :-1], table[:, -1:])


@dataclass
class PoolSplit:
    train: np.ndarray
    test: np.ndarray
    pool: np.ndarray

    def __post_init__(self):
        sets = [set(self.train.tolist()), set(self.test.tolist()), set(self.pool.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train, test and pool must be disjoint")

    def acquire(self, pool_position: int) -> "PoolSplit":
        """Move the pool entry at ``pool_position`` into the training set."""
        idx = self.pool[pool_position]
        return PoolSplit(np.append(self.train, idx), self.test, np.delete(self.pool, pool_position))


def make_pool_split(n: int, n_train: int = 20, n_test: int = 100, seed: int = 0) -> PoolSplit:
    if n < n_train + n_test + 1:
        raise ValueError(f"need at least {n_train + n_test + 1} points, have {n}")
    perm = np.random.default_rng(seed).permutation(n)
    # the pool is kept sorted so position ties resolve to the lowest dataset index
    return PoolSplit(perm[:n_train], perm[n_train:n_train + n_test], np.sort(perm[n_train + n_test:]))
