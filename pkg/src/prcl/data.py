"""Datasets: in-memory container, desk-scale generators, CSV and IDX loaders."""
from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_KINDS = ("two_moons", "gaussian_blobs", "digits8x8")


@dataclass
class Dataset:
    """Stacked samples.

    ``inputs`` has shape (m, *sample_shape).  ``labels`` holds integer class
    indices of shape (m,) for classification, or float targets of shape
    (m, *target_shape) for regression.
    """

    inputs: np.ndarray
    labels: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.inputs.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("dataset inputs contain NaN or Inf")

    @property
    def m(self) -> int:
        return self.inputs.shape[0]

    def __len__(self) -> int:
        return self.m

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx, suffix: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        name = self.id if suffix is None else f"{self.id}/{suffix}"
        return Dataset(self.inputs[idx], self.labels[idx], name)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


def _balanced_counts(n: int, k: int) -> list[int]:
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def two_moons(n: int, seed: int, noise: float = 0.25) -> Dataset:
    rng = np.random.default_rng(seed)
    n0, n1 = _balanced_counts(n, 2)
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], f"two_moons-n{n}-s{seed}")


def gaussian_blobs(n: int, seed: int, classes: int = 10, dim: int = 8,
                   spread: float = 1.0, separation: float = 2.5) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((classes, dim))
    counts = _balanced_counts(n, classes)
    y = np.repeat(np.arange(classes), counts)
    x = centers[y] + spread * rng.standard_normal((n, dim))
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm].astype(np.int64), f"gaussian_blobs-n{n}-s{seed}")


# 3x5 glyphs, one string per row
_GLYPHS = {
    0: ["###", "#.#", "#.#", "#.#", "###"],
    1: [".#.", "##.", ".#.", ".#.", "###"],
    2: ["###", "..#", "###", "#..", "###"],
    3: ["###", "..#", ".##", "..#", "###"],
    4: ["#.#", "#.#", "###", "..#", "..#"],
    5: ["###", "#..", "###", "..#", "###"],
    6: ["###", "#..", "###", "#.#", "###"],
    7: ["###", "..#", ".#.", ".#.", ".#."],
    8: ["###", "#.#", "###", "#.#", "###"],
    9: ["###", "#.#", "###", "..#", "###"],
}


def _glyph(d: int) -> np.ndarray:
    return np.array([[c == "#" for c in row] for row in _GLYPHS[d]], dtype=np.float64)


def digits8x8(n: int, seed: int, noise: float = 0.3) -> Dataset:
    """Digit glyphs scaled into an 8x8 canvas with random placement and pixel noise."""
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n, 10)
    y = np.repeat(np.arange(10), counts)
    x = np.zeros((n, 1, 8, 8))
    for i, d in enumerate(y):
        g = _glyph(int(d))
        # 3x5 glyph stretched to 4x6 by duplicating the middle column/row
        g = np.insert(g, 1, g[:, 1], axis=1)
        g = np.insert(g, 2, g[2], axis=0)
        r0 = rng.integers(0, 8 - g.shape[0] + 1)
        c0 = rng.integers(0, 8 - g.shape[1] + 1)
        x[i, 0, r0:r0 + g.shape[0], c0:c0 + g.shape[1]] = g
    x += noise * rng.standard_normal(x.shape)
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm].astype(np.int64), f"digits8x8-n{n}-s{seed}")


def generate_dataset(kind: str, n: int, seed: int, **params) -> Dataset:
    """Deterministic, class-balanced synthetic data."""
    if n < 2:
        raise ValueError("n must be at least 2")
    gens = {"two_moons": two_moons, "gaussian_blobs": gaussian_blobs, "digits8x8": digits8x8}
    if kind not in gens:
        raise ValueError(f"unknown dataset kind {kind!r}; choose one of {', '.join(DATASET_KINDS)}")
    return gens[kind](n, seed, **params)


def load_csv(path, shape: tuple[int, ...] | None = None) -> Dataset:
    """Read a CSV with a header row; the column named ``label`` holds class ids."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ValueError(f"{path}: no column named 'label'")
        li = header.index("label")
        rows = [r for r in reader if r]
    data = np.array([[float(v) for j, v in enumerate(r) if j != li] for r in rows])
    labels = np.array([int(float(r[li])) for r in rows], dtype=np.int64)
    if shape is not None:
        data = data.reshape((len(rows), *shape))
    return Dataset(data, labels, path.stem)


def save_csv(ds: Dataset, path) -> None:
    flat = ds.inputs.reshape(ds.m, -1)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(flat.shape[1])] + ["label"])
        for row, lab in zip(flat, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    dtype, ndim = raw[2], raw[3]
    if dtype not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX element type 0x{dtype:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    arr = np.frombuffer(raw, dtype=_IDX_TYPES[dtype], offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {arr.size} elements, header says {dims}")
    return arr.reshape(dims)


def write_idx(arr: np.ndarray, path) -> None:
    codes = {v: k for k, v in _IDX_TYPES.items()}
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder(">").str if arr.dtype.itemsize > 1 else ">" + arr.dtype.str[1:]
    code = codes.get(dt)
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX code")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(dt).tobytes())


def load_idx(images_path, labels_path, scale: float = 1.0 / 255.0) -> Dataset:
    """MNIST-style image/label pair; 3-D image arrays gain a channel axis."""
    images = read_idx(images_path).astype(np.float64)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None, :, :]
    images = images * scale
    return Dataset(images, labels, Path(images_path).name.split(".")[0])
