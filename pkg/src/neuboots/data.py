"""Datasets: validated container, synthetic generators and CSV ingestion.

Regression inputs are drawn uniformly from an interval that depends on the
generator (``REGRESSION_INTERVALS``). Classification generators return
integer labels in ``[0, k)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Dataset:
    """``x`` is ``(n, p)``; ``y`` is ``(n, d)`` floats or ``(n,)`` class indices."""

    x: np.ndarray
    y: np.ndarray
    task: str
    k: int | None = None
    feature_names: tuple[str, ...] = ()
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError(f"x must be a non-empty (n, p) matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            r, c = np.argwhere(~np.isfinite(x))[0]
            raise DataError(f"non-finite feature at row {r}, column {c}")
        y = np.asarray(self.y)
        if y.shape[0] != x.shape[0]:
            raise DataError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if self.task == "classification":
            if self.k is None or self.k < 2:
                raise DataError("classification needs k >= 2")
            if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
                raise DataError("classification targets must be a 1-D integer array")
            if y.min() < 0 or y.max() >= self.k:
                raise DataError(f"class indices must lie in [0, {self.k})")
        elif self.task == "regression":
            y = y.astype(float).reshape(len(y), -1)
            if not np.all(np.isfinite(y)):
                raise DataError("non-finite regression target")
        else:
            raise DataError(f"unknown task {self.task!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def out_dim(self) -> int:
        return self.k if self.task == "classification" else self.y.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.task, self.k, self.feature_names, self.class_names)


# -- regression ----------------------------------------------------------------

def _bumps(x):
    return np.exp(-4 * (x + 1.5) ** 2) + 1.5 * np.exp(-8 * (x - 1) ** 2)


REGRESSION_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sine": np.sin,
    "step": lambda x: np.where(x > 0, 1.0, 0.0),
    "bumps": _bumps,
    "linear": lambda x: 0.5 * x + 1.0,
}
REGRESSION_INTERVALS = {"sine": (-3.0, 3.0), "step": (-3.0, 3.0), "bumps": (-3.0, 3.0), "linear": (-3.0, 3.0)}


def truth_function(name: str) -> Callable[[np.ndarray], np.ndarray]:
    if name not in REGRESSION_FUNCTIONS:
        raise DataError(f"unknown regression generator {name!r}; choose from {sorted(REGRESSION_FUNCTIONS)}")
    return REGRESSION_FUNCTIONS[name]


def synth_regression(name: str, n: int, noise_sd: float, rng: np.random.Generator):
    """``x ~ U(interval)``, ``y = f(x) + N(0, noise_sd^2)``; returns ``(Dataset, f)``."""
    f = truth_function(name)
    if n < 10:
        raise DataError(f"need n >= 10, got {n}")
    if noise_sd < 0:
        raise DataError("noise_sd must be nonnegative")
    lo, hi = REGRESSION_INTERVALS[name]
    x = rng.uniform(lo, hi, size=(n, 1))
    y = f(x[:, 0]) + noise_sd * rng.standard_normal(n)
    return Dataset(x, y[:, None], "regression"), f


# -- classification ------------------------------------------------------------

@dataclass(frozen=True)
class ClassificationParams:
    """Knobs shared by the classification generators.

    ``counts`` fixes per-class sizes (required for ``imbalanced_gaussians``).
    Gaussian class means sit on a circle of radius ``radius`` in the first
    two coordinates; ``dim`` pads with pure-noise coordinates. ``label_noise``
    is the fraction of labels replaced by a uniformly drawn different class.
    """

    k: int = 2
    noise: float = 0.2
    separation: float = 0.0
    radius: float = 3.0
    scale: float = 1.0
    dim: int = 2
    counts: tuple[int, ...] | None = None
    label_noise: float = 0.0
    shift: float = 0.0


def gaussian_means(k: int, radius: float, dim: int = 2) -> np.ndarray:
    """Class means evenly spaced on a circle, zero in the extra coordinates."""
    angle = 2 * np.pi * np.arange(k) / k
    means = np.zeros((k, max(dim, 2)))
    means[:, 0] = radius * np.cos(angle)
    means[:, 1] = radius * np.sin(angle)
    return means[:, :dim] if dim >= 2 else means[:, :1]


def _moons(counts, params, rng):
    n0, n1 = counts
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0) + params.separation / 2])
    lower = np.column_stack([1 - np.cos(t1), 0.5 - np.sin(t1) - params.separation / 2])
    x = np.concatenate([upper, lower]) + params.noise * rng.standard_normal((n0 + n1, 2))
    return x, np.repeat([0, 1], [n0, n1])


def _gaussians(counts, params, rng):
    means = gaussian_means(len(counts), params.radius, params.dim)
    means = means + params.shift * params.scale * np.eye(1, means.shape[1])[0]
    labels = np.repeat(np.arange(len(counts)), counts)
    x = means[labels] + params.scale * rng.standard_normal((len(labels), means.shape[1]))
    return x, labels


def _split_evenly(n, k):
    return tuple(n // k + (c < n % k) for c in range(k))


def _flip_labels(labels, k, fraction, rng):
    flip = rng.random(len(labels)) < fraction
    offsets = rng.integers(1, k, size=len(labels))
    return np.where(flip, (labels + offsets) % k, labels)


def synth_classification(name: str, n: int, params: ClassificationParams | None, rng: np.random.Generator) -> Dataset:
    """Two moons, isotropic Gaussian classes, or Gaussians with explicit counts.

    ``shift`` moves every Gaussian mean by ``shift * scale`` along the first
    axis, which is how out-of-distribution variants are built. Rows are
    ordered by class; shuffle before splitting.
    """
    params = params or ClassificationParams()
    if name == "two_moons":
        counts = params.counts or _split_evenly(n, 2)
        k = 2
        if len(counts) != 2:
            raise DataError(f"two_moons has 2 classes, got {len(counts)} counts")
        x, y = _moons(counts, params, rng)
    elif name in ("gaussians", "imbalanced_gaussians"):
        k = params.k
        if name == "imbalanced_gaussians" and params.counts is None:
            raise DataError("imbalanced_gaussians needs an explicit per-class counts vector")
        counts = params.counts or _split_evenly(n, k)
        if len(counts) != k:
            raise DataError(f"counts vector has {len(counts)} entries for k={k} classes")
        if any(c < 0 for c in counts):
            raise DataError("class counts must be nonnegative")
        x, y = _gaussians(counts, params, rng)
    else:
        raise DataError(f"unknown classification generator {name!r}; "
                        "choose from ['gaussians', 'imbalanced_gaussians', 'two_moons']")
    if params.label_noise:
        y = _flip_labels(y, k, params.label_noise, rng)
    return Dataset(x, y.astype(np.int64), "classification", k)


def shuffle_split(data: Dataset, n_first: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    perm = rng.permutation(data.n)
    return data.subset(perm[:n_first]), data.subset(perm[n_first:])


# -- CSV -------------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Which column is the target and how to read it.

    ``features`` defaults to every other column. For classification the
    label strings map to indices in the order of ``classes``; without
    ``classes`` they must be integers, and ``k`` defaults to max + 1.
    """

    label: str
    task: str = "classification"
    features: tuple[str, ...] | None = None
    classes: tuple[str, ...] | None = None
    k: int | None = None


def _parse_float(cell, row, col):
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def _read_table(path):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not UTF-8: {exc}") from exc
    except csv.Error as exc:
        raise DataError(f"{path}: malformed CSV: {exc}") from exc
    if not rows or not any(rows[0]):
        raise DataError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    if not body:
        raise DataError(f"{path} has a header but no data rows")
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"row {r}: expected {len(header)} cells, found {len(row)}")
    return header, body


def _feature_matrix(path, header, body, features):
    missing = [c for c in features if c not in header]
    if missing:
        raise DataError(f"{path}: feature columns {missing} not in header")
    col = {h: i for i, h in enumerate(header)}
    x = np.empty((len(body), len(features)))
    for r, row in enumerate(body, start=1):
        for j, name in enumerate(features):
            x[r - 1, j] = _parse_float(row[col[name]], r, name)
    return x


def load_csv_features(path, drop: tuple[str, ...] = ()) -> tuple[np.ndarray, tuple[str, ...]]:
    """Every column not in ``drop`` as a float matrix, plus the column names."""
    header, body = _read_table(path)
    features = tuple(h for h in header if h not in drop)
    return _feature_matrix(path, header, body, features), features


def load_csv_dataset(path, schema: CsvSchema) -> Dataset:
    """Read a headed UTF-8 CSV into a :class:`Dataset`.

    Rows in error messages count data rows from 1, so the first line after
    the header is row 1.
    """
    header, body = _read_table(path)
    if schema.label not in header:
        raise DataError(f"{path}: label column {schema.label!r} not in header {header}")
    features = schema.features or tuple(h for h in header if h != schema.label)
    x = _feature_matrix(path, header, body, features)
    labels = [row[header.index(schema.label)] for row in body]

    if schema.task == "regression":
        y = np.array([_parse_float(v, r, schema.label) for r, v in enumerate(labels, start=1)])
        return Dataset(x, y[:, None], "regression", feature_names=tuple(features))

    if schema.classes is not None:
        index = {c: i for i, c in enumerate(schema.classes)}
        y = []
        for r, v in enumerate(labels, start=1):
            if v not in index:
                raise DataError(f"row {r}, column {schema.label!r}: unknown class label {v!r}")
            y.append(index[v])
        k, names = len(schema.classes), tuple(schema.classes)
    else:
        y = []
        for r, v in enumerate(labels, start=1):
            try:
                y.append(int(v))
            except ValueError:
                raise DataError(f"row {r}, column {schema.label!r}: label {v!r} is not an integer; "
                                "pass the class names explicitly") from None
            if y[-1] < 0:
                raise DataError(f"row {r}, column {schema.label!r}: negative class index {v}")
        k = schema.k or max(max(y) + 1, 2)
        if max(y) >= k:
            raise DataError(f"class index {max(y)} is outside [0, {k})")
        names = tuple(str(c) for c in range(k))
    return Dataset(x, np.asarray(y, dtype=np.int64), "classification", k, tuple(features), names)


def write_csv_dataset(path, data: Dataset, label: str = "y") -> None:
    """Write features then the target; class indices become class names when known."""
    names = data.feature_names or tuple(f"x{j + 1}" for j in range(data.p))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*names, label])
        for xi, yi in zip(data.x, data.y):
            if data.task == "classification":
                target = data.class_names[yi] if data.class_names else int(yi)
            else:
                target = repr(float(yi[0]))
            w.writerow([*(repr(float(v)) for v in xi), target])


def class_counts(data: Dataset) -> np.ndarray:
    return np.bincount(data.y, minlength=data.k)


def regression_grid(name: str, m: int, margin: float = 0.5) -> np.ndarray:
    """``m`` evenly spaced points inside the generator's interval, ``margin`` from each end."""
    truth_function(name)
    lo, hi = REGRESSION_INTERVALS[name]
    return np.linspace(lo + margin, hi - margin, m)[:, None]

