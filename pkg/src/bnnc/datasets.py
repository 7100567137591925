"""Dataset ingestion: MNIST IDX files, jet-tagging CSV, deterministic splits."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
JET_CLASSES = ("g", "q", "W", "Z", "t")
JET_FEATURES = (
    "j_zlogz", "j_c1_b0_mmdt", "j_c1_b1_mmdt", "j_c1_b2_mmdt", "j_c2_b1_mmdt",
    "j_c2_b2_mmdt", "j_d2_b1_mmdt", "j_d2_b2_mmdt", "j_d2_a1_b1_mmdt", "j_d2_a1_b2_mmdt",
    "j_m2_b1_mmdt", "j_m2_b2_mmdt", "j_n2_b1_mmdt", "j_n2_b2_mmdt", "j_mass_mmdt",
    "j_multiplicity",
)
# one-hot label columns as found in the upstream jet files
_JET_ONEHOT = {"j_g": "g", "j_q": "q", "j_w": "W", "j_z": "Z", "j_t": "t"}


class DataError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    class_names: tuple
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise DataError(f"features {self.x.shape} do not match labels {self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise DataError("label outside the class range")
        if np.isnan(self.x).any():
            raise DataError("features contain NaN")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.class_names, split or self.split,
                       dict(self.meta))


# -- MNIST -------------------------------------------------------------------

def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise DataError(f"{path}: truncated header at offset 0")
    magic = struct.unpack_from(">I", data, 0)[0]
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08X} at offset 0 "
                        f"(expected 0x{expected_magic:08X})")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{path}: truncated dimensions at offset 4")
    dims = struct.unpack_from(">" + "I" * ndim, data, 4)
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise DataError(f"{path}: truncated payload at offset {len(data)}; "
                        f"expected {count} bytes after offset {header}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "all") -> Dataset:
    """Parse big-endian IDX image/label files (optionally gzipped).

    Pixels are scaled to [0, 1] and each 28x28 image is flattened row-major.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise DataError("MNIST labels must be digits 0-9")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), tuple(str(d) for d in range(10)), split)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- jets --------------------------------------------------------------------

def _standardize(x: np.ndarray, mean=None, std=None):
    if mean is None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
    std = np.where(np.asarray(std) > 0, std, 1.0)
    return (x - mean) / std, np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)


def load_jet_csv(path, standardization: dict | None = None, standardize: bool = True) -> Dataset:
    """Read 16 named jet features and a label per row.

    Columns are located by name.  The label is either a ``label`` column with
    values in {g, q, W, Z, t} or the one-hot ``j_g, j_q, j_w, j_z, j_t``
    columns.  Features are standardized with ``standardization`` (``mean``,
    ``std`` lists) when given, otherwise with statistics of this file, which
    are stored in ``meta["standardization"]``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        missing = [f for f in JET_FEATURES if f not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        feat_idx = [header.index(f) for f in JET_FEATURES]
        if "label" in header:
            label_idx, onehot_idx = header.index("label"), None
        elif all(c in header for c in _JET_ONEHOT):
            label_idx, onehot_idx = None, [header.index(c) for c in _JET_ONEHOT]
        else:
            raise DataError(f"{path}: no label column")
        rows, labels = [], []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {rownum} has {len(row)} columns, "
                                f"header has {len(header)}")
            try:
                rows.append([float(row[i]) for i in feat_idx])
            except ValueError:
                raise DataError(f"{path}: row {rownum} has a non-numeric feature") from None
            if label_idx is not None:
                name = row[label_idx].strip()
                if name not in JET_CLASSES:
                    raise DataError(f"{path}: row {rownum} has unknown label {name!r}")
                labels.append(JET_CLASSES.index(name))
            else:
                hot = [float(row[i]) for i in onehot_idx]
                if sorted(hot) != [0.0] * 4 + [1.0]:
                    raise DataError(f"{path}: row {rownum} has an invalid one-hot label")
                labels.append(hot.index(1.0))
    x = np.asarray(rows, dtype=np.float64).reshape(-1, len(JET_FEATURES))
    meta = {}
    if standardize:
        mean = std = None
        if standardization is not None:
            mean, std = standardization["mean"], standardization["std"]
        x, mean, std = _standardize(x, mean, std)
        meta["standardization"] = {"mean": mean.tolist(), "std": std.tolist()}
    return Dataset(x, np.asarray(labels, dtype=np.int64), JET_CLASSES, "all", meta)


# -- splits ------------------------------------------------------------------

def split_indices(n: int, fractions, seed: int) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with ``seed`` and cut it by ``fractions`` (summing to 1)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("split fractions must be non-negative and sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.round(np.cumsum(fractions)[:-1] * n).astype(int)
    return np.split(perm, cuts)


def split_dataset(ds: Dataset, fractions, names, seed: int) -> dict:
    parts = split_indices(len(ds), fractions, seed)
    return {name: ds.subset(idx, name) for name, idx in zip(names, parts)}


def _find(directory, names):
    for name in names:
        for cand in (name, name + ".gz"):
            path = os.path.join(directory, cand)
            if os.path.exists(path):
                return path
    return None


def load_mnist_dir(directory, split_seed: int = 0, test_fraction: float = 0.2) -> dict:
    """Load MNIST from a directory of IDX files as ``{"train": ..., "test": ...}``.

    The standard ``train-*`` / ``t10k-*`` file pairs are used as given.  A
    single ``images-idx3-ubyte`` / ``labels-idx1-ubyte`` pool is split into
    train and test with ``split_seed``.
    """
    train = _find(directory, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"])
    if train is not None:
        out = {"train": load_mnist_idx(train, _find(directory, ["train-labels-idx1-ubyte",
                                                                 "train-labels.idx1-ubyte"]),
                                       "train")}
        t_img = _find(directory, ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])
        t_lbl = _find(directory, ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])
        if t_img is None or t_lbl is None:
            raise DataError(f"{directory}: training files found but no t10k test files")
        out["test"] = load_mnist_idx(t_img, t_lbl, "test")
        return out
    img = _find(directory, ["images-idx3-ubyte"])
    lbl = _find(directory, ["labels-idx1-ubyte"])
    if img is None or lbl is None:
        raise DataError(f"{directory}: no MNIST IDX files found")
    pool = load_mnist_idx(img, lbl)
    return split_dataset(pool, [1.0 - test_fraction, test_fraction], ["train", "test"], split_seed)


def standardize_splits(splits: dict, fit_on: str = "train") -> dict:
    """Standardize every split with mean/std of ``fit_on``; returns the parameters."""
    _, mean, std = _standardize(splits[fit_on].x)
    for ds in splits.values():
        ds.x, _, _ = _standardize(ds.x, mean, std)
    params = {"mean": mean.tolist(), "std": std.tolist()}
    for ds in splits.values():
        ds.meta["standardization"] = params
    return params
