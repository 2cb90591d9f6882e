"""Datasets: CSV/IDX loading, pooled standardization, and synthetic toys.

Labels are strings everywhere (digits and letters get stringified), and the
class list preserves first appearance order from the data. Toy constructors
return data whose pooled per-feature variance is already 1, so the diffusion
prior N(0, I) matches the t = T marginal without a standardization pass.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, DomainError, StateError
from .hierarchy import BranchHierarchy, build_hierarchy
from .rng import substream


@dataclass
class TabularDataset:
    features: np.ndarray
    labels: list[str]
    feature_names: tuple[str, ...] = ()
    standardization: tuple[np.ndarray, np.ndarray] | None = None
    truth: dict | None = None  # per-class (mean, cov) for synthetic data

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise DataError(f"feature matrix must be 2-d, got {self.features.shape}")
        if len(self.labels) != self.features.shape[0]:
            raise DataError("label count does not match feature rows")
        if not np.isfinite(self.features).all():
            raise DataError("non-finite feature values")
        if not self.feature_names:
            self.feature_names = tuple(f"feature_{j}" for j in range(self.features.shape[1]))
        if len(self.feature_names) != self.features.shape[1]:
            raise DataError("feature name count does not match columns")
        self.labels = [str(c) for c in self.labels]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.labels))

    def by_class(self, c: str) -> np.ndarray:
        mask = np.array([lab == c for lab in self.labels])
        if not mask.any():
            raise DataError(f"no rows with class {c!r}")
        return self.features[mask]

    def subset(self, rows: np.ndarray) -> "TabularDataset":
        return replace(self, features=self.features[rows],
                       labels=[self.labels[int(i)] for i in rows])


def load_csv(path, label_column: str) -> TabularDataset:
    """Read a labeled CSV with a header row; every non-label cell must parse real."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except (UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"{path} is not a text CSV: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if label_column not in header:
        raise DataError(f"{path}: no column named {label_column!r}")
    label_at = header.index(label_column)
    names = tuple(h for k, h in enumerate(header) if k != label_at)

    feats, labels = [], []
    for row_num, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {row_num} has {len(row)} cells, expected {len(header)}")
        vals = []
        for k, cell in enumerate(row):
            if k == label_at:
                continue
            try:
                x = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {row_num}: cannot parse {cell!r}") from None
            if not math.isfinite(x):
                raise DataError(f"{path}: row {row_num}: non-finite value {cell!r}")
            vals.append(x)
        feats.append(vals)
        labels.append(row[label_at])
    if not feats:
        raise DataError(f"{path}: no data rows")
    return TabularDataset(np.array(feats, dtype=np.float32), labels, names)


def standardize(ds: TabularDataset) -> TabularDataset:
    """Pooled per-feature zero mean / unit variance; parameters kept for inverse."""
    mean = ds.features.mean(axis=0, dtype=np.float64)
    std = ds.features.std(axis=0, dtype=np.float64)
    dead = np.flatnonzero(std == 0)
    if dead.size:
        raise DataError(f"zero-variance feature {ds.feature_names[dead[0]]!r}")
    scaled = ((ds.features - mean) / std).astype(np.float32)
    return replace(ds, features=scaled, standardization=(mean, std))


def destandardize(ds: TabularDataset, x: np.ndarray) -> np.ndarray:
    if ds.standardization is None:
        raise StateError("dataset carries no standardization parameters")
    mean, std = ds.standardization
    return np.asarray(x, dtype=np.float64) * std + mean


def synth_gaussian_mixture(spec: dict, n_per_class: int, seed: int) -> TabularDataset:
    """Labeled Gaussian draws per class; spec maps class -> (mean, cov).

    The analytic truth is kept on the dataset for metric oracles.
    """
    if n_per_class < 1:
        raise DomainError("n_per_class must be positive")
    feats, labels, truth = [], [], {}
    rng = substream(seed, "synth")
    for c, (mean, cov) in spec.items():
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise DataError(f"class {c!r}: cov shape {cov.shape} for dim {mean.size}")
        vals, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
        if vals.min() < -1e-9 * max(vals.max(), 1.0):
            raise DataError(f"class {c!r}: covariance is not positive semidefinite")
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
        z = rng.standard_normal((n_per_class, mean.size))
        feats.append(mean + z @ factor.T)
        labels += [str(c)] * n_per_class
        truth[str(c)] = (mean, cov)
    features = np.concatenate(feats).astype(np.float32)
    return TabularDataset(features, labels, truth=truth)


# ---------------------------------------------------------------------------
# shipped toys (pooled variance 1 by construction)
# ---------------------------------------------------------------------------

TOY_COV = np.diag([0.36, 1.0])  # dim 0 carries the class split: 0.36 + 0.8^2 = 1
TOY_MEANS = {"left": np.array([-0.8, 0.0]), "right": np.array([0.8, 0.0])}
EXTRA_MEAN = np.array([0.8, 0.3])  # grafted near "right"; shares its dim-0 mode
TOY_BRANCH_TIME = 0.5
EXTRA_ATTACH_TIME = 0.35


def two_class_toy(n_per_class: int = 1000, seed: int = 0):
    """2-d two-class Gaussian toy and its fixed two-leaf hierarchy.

    Dim 0 separates the classes; dim 1 is a shared latent kept identical
    across classes (the coordinate tracked by transmutation checks).
    """
    spec = {c: (m, TOY_COV) for c, m in TOY_MEANS.items()}
    data = synth_gaussian_mixture(spec, n_per_class, seed)
    tree = build_hierarchy({("left", "right"): TOY_BRANCH_TIME}, ("left", "right"), 1.0)
    return data, tree


def two_class_toy_discrete(n_per_class: int = 1000, seed: int = 0, steps: int = 1000):
    """Same toy over integer-step time with the split at the midpoint step."""
    spec = {c: (m, TOY_COV) for c, m in TOY_MEANS.items()}
    data = synth_gaussian_mixture(spec, n_per_class, seed)
    tree = build_hierarchy({("left", "right"): steps // 2}, ("left", "right"), steps)
    return data, tree


def extension_class_toy(n_per_class: int = 1000, seed: int = 1) -> TabularDataset:
    """New-class data for extension runs: class "extra" close to "right"."""
    return synth_gaussian_mixture({"extra": (EXTRA_MEAN, TOY_COV)}, n_per_class, seed)


def cluster_line_toy(means, n_per_class: int = 500, seed: int = 0) -> TabularDataset:
    """1-d unit-variance classes at the given means (discovery toys)."""
    spec = {f"c{k}": (np.array([m], dtype=float), np.eye(1)) for k, m in enumerate(means)}
    return synth_gaussian_mixture(spec, n_per_class, seed)


# ---------------------------------------------------------------------------
# IDX image format
# ---------------------------------------------------------------------------

def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated IDX file while reading {what}")
    return buf


def load_idx_images(images_path, labels_path, downscale: int = 1) -> TabularDataset:
    """Load IDX-format images/labels into [-1, 1) features.

    Pixels map through x/128 - 1; downscale > 1 applies block-mean pooling
    (the factor must divide both image sides).
    """
    if downscale < 1:
        raise DomainError("downscale must be >= 1")
    try:
        with open(images_path, "rb") as fh:
            magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
            if magic != 0x803:
                raise DataError(f"bad image magic 0x{magic:x}")
            raw = _read_exact(fh, count * rows * cols, "image data")
        with open(labels_path, "rb") as fh:
            magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
            if magic != 0x801:
                raise DataError(f"bad label magic 0x{magic:x}")
            lab_raw = _read_exact(fh, n_labels, "label data")
    except OSError as exc:
        raise DataError(f"cannot read IDX files: {exc}") from exc
    if count != n_labels:
        raise DataError(f"{count} images but {n_labels} labels")
    if rows % downscale or cols % downscale:
        raise DataError(f"downscale {downscale} does not divide {rows}x{cols}")

    imgs = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols).astype(np.float32)
    if downscale > 1:
        r, c = rows // downscale, cols // downscale
        imgs = imgs.reshape(count, r, downscale, c, downscale).mean(axis=(2, 4))
    feats = (imgs / 128.0 - 1.0).reshape(count, -1)
    labels = [str(int(v)) for v in np.frombuffer(lab_raw, dtype=np.uint8)]
    return TabularDataset(feats, labels)
