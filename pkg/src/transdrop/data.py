"""Toy data, CSV ingestion, covariate-shift splitting and the augmented dataset."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

TOY_SOURCE = (7.0, 2.0)  # mean, sd (variance 4)
TOY_TARGET = (11.0, 2.0)
TOY_NOISE_SD = 0.1


class DataError(ValueError):
    pass


@dataclass
class LabelledSet:
    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise DataError("non-finite values in labelled set")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.features.shape[1])]

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "LabelledSet":
        return LabelledSet(self.features[idx], self.labels[idx], list(self.feature_names))


@dataclass
class UnlabelledSet:
    features: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.features.shape[1])]

    def __len__(self):
        return self.features.shape[0]


@dataclass
class AugmentedDataset:
    """Source rows (``z = 0``, labelled) followed by target rows (``z = 1``).

    ``features`` are standardised with statistics fitted on the source rows;
    ``raw_features`` keeps the original values. Target labels are NaN, i.e.
    absent; they never hold a real number.
    """

    features: np.ndarray
    raw_features: np.ndarray
    labels: np.ndarray
    z: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    @property
    def n_source(self) -> int:
        return int(np.sum(self.z == 0))

    @property
    def n_target(self) -> int:
        return int(np.sum(self.z == 1))

    def label(self, k: int) -> float | None:
        return None if self.z[k] == 1 else float(self.labels[k])

    @property
    def source_x(self) -> np.ndarray:
        return self.features[self.z == 0]

    @property
    def source_y(self) -> np.ndarray:
        return self.labels[self.z == 0]

    @property
    def target_x(self) -> np.ndarray:
        return self.features[self.z == 1]

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        return (x - self.mean) / self.sd


@dataclass(frozen=True)
class ShiftSplitSpec:
    test_fraction: float = 0.2
    seed: int = 0
    weighting_temperature: float = 1.0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise DataError("test_fraction must lie in (0, 1)")
        if not self.weighting_temperature > 0:
            raise DataError("weighting_temperature must be positive")


# Toy problem -----------------------------------------------------------------

def toy_function(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sin(x) / 2 + x / 4 + x ** 2 / 100


def gen_toy(seed=0, n_src: int = 50, n_tgt: int = 50, noise_sd: float = TOY_NOISE_SD):
    """Source x ~ N(7, 4), target x ~ N(11, 4), y = f(x) + noise.

    Returns ``(labelled source, unlabelled target, hidden target labels)``.
    """
    if n_src < 1 or n_tgt < 1:
        raise DataError("n_src and n_tgt must be at least 1")
    rng = np.random.default_rng(seed)
    xs = rng.normal(*TOY_SOURCE, size=n_src)
    ys = toy_function(xs) + rng.normal(0.0, noise_sd, size=n_src)
    xt = rng.normal(*TOY_TARGET, size=n_tgt)
    yt = toy_function(xt) + rng.normal(0.0, noise_sd, size=n_tgt)
    return (LabelledSet(xs[:, None], ys, ["x"]), UnlabelledSet(xt[:, None], ["x"]), yt)


# CSV ingestion ---------------------------------------------------------------

def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
    return header, body


def _numeric_column(path, name, values, row_offset=2):
    out = np.empty(len(values))
    for i, v in enumerate(values):
        try:
            out[i] = float(v)
        except ValueError:
            raise DataError(f"{path}: non-numeric value {v!r} in column {name!r} "
                            f"(row {i + row_offset})") from None
    return out


def load_csv(path, label_column: str, positive_class: str | None = None,
             binarize: bool = False) -> LabelledSet:
    """Read a headed CSV. Every column except ``label_column`` is a feature.

    With ``positive_class`` the label becomes 1 for that class and 0 otherwise;
    with ``binarize`` the most populous class is made positive.
    """
    header, body = read_table(path)
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not found")
    li = header.index(label_column)
    raw_labels = [r[li].strip() for r in body]
    names = [h for j, h in enumerate(header) if j != li]
    cols = [_numeric_column(path, h, [r[j].strip() for r in body])
            for j, h in enumerate(header) if j != li]
    features = np.column_stack(cols) if cols else np.empty((len(body), 0))
    if positive_class is not None:
        labels = np.array([1.0 if v == str(positive_class) else 0.0 for v in raw_labels])
    elif binarize:
        labels = binarize_largest_class(raw_labels)
    else:
        labels = _numeric_column(path, label_column, raw_labels)
    return LabelledSet(features, labels, names)


def load_features_csv(path) -> UnlabelledSet:
    header, body = read_table(path)
    cols = [_numeric_column(path, h, [r[j].strip() for r in body]) for j, h in enumerate(header)]
    return UnlabelledSet(np.column_stack(cols), header)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_labelled(path, data: LabelledSet, label_name: str = "y") -> None:
    write_csv(path, [*data.feature_names, label_name],
              [[*row, lab] for row, lab in zip(data.features, data.labels)])


def _class_sort_key(c):
    try:
        return (0, float(c), str(c))
    except (TypeError, ValueError):
        return (1, 0.0, str(c))


def binarize_largest_class(labels) -> np.ndarray:
    """Most populous class -> 1, all others -> 0; ties go to the smallest identifier."""
    values = list(labels)
    classes = sorted(set(values), key=_class_sort_key)
    if len(classes) < 2:
        raise DataError("binarize_largest_class needs at least two distinct classes")
    counts = {c: 0 for c in classes}
    for v in values:
        counts[v] += 1
    top = max(counts.values())
    positive = next(c for c in classes if counts[c] == top)
    return np.array([1.0 if v == positive else 0.0 for v in values])


# Covariate-shift split -------------------------------------------------------

def principal_scores(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores on the first principal component of the standardised features.

    The loading vector's sign is fixed so that its first nonzero entry is positive.
    """
    X = np.asarray(features, dtype=np.float64)
    sd = X.std(axis=0)
    keep = sd > 0
    if not np.any(keep):
        raise DataError("degenerate covariance: every column is constant")
    Z = np.zeros_like(X)
    Z[:, keep] = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    loading = vt[0]
    nz = np.flatnonzero(np.abs(loading) > 1e-12)
    if loading[nz[0]] < 0:
        loading = -loading
    return Z @ loading, loading


def shift_split(data: LabelledSet, spec: ShiftSplitSpec = ShiftSplitSpec()):
    """Sample a test set with probability softmax(PC score / temperature).

    Returns ``(train, test, test_indices)``; the test labels are for evaluation.
    """
    n = len(data)
    if n < 5:
        raise DataError("shift_split needs at least 5 rows")
    scores, _ = principal_scores(data.features)
    logits = scores / spec.weighting_temperature
    w = np.exp(logits - logits.max())
    w /= w.sum()
    n_test = int(round(spec.test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(spec.seed)
    test_idx = np.sort(rng.choice(n, size=n_test, replace=False, p=w))
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return data.subset(train_idx), data.subset(test_idx), test_idx


# Augmented dataset -----------------------------------------------------------

def build_augmented(train: LabelledSet, target) -> AugmentedDataset:
    tx = target.features if hasattr(target, "features") else np.asarray(target, dtype=np.float64)
    if tx.ndim == 1:
        tx = tx[:, None]
    if tx.shape[1] != train.features.shape[1]:
        raise DataError(f"feature width mismatch: {train.features.shape[1]} vs {tx.shape[1]}")
    raw = np.vstack([train.features, tx])
    mean = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    labels = np.concatenate([train.labels, np.full(tx.shape[0], np.nan)])
    z = np.concatenate([np.zeros(len(train), dtype=int), np.ones(tx.shape[0], dtype=int)])
    return AugmentedDataset((raw - mean) / sd, raw, labels, z, mean, sd, list(train.feature_names))


# Built-in public datasets ----------------------------------------------------

BUILTIN = ("breast_cancer", "iris", "wine")


def load_builtin(name: str) -> tuple[LabelledSet, np.ndarray]:
    """One of the bundled UCI datasets as ``(features with raw class ids, class ids)``."""
    from sklearn import datasets

    loader = {"breast_cancer": datasets.load_breast_cancer, "iris": datasets.load_iris,
              "wine": datasets.load_wine}.get(name)
    if loader is None:
        raise DataError(f"unknown builtin dataset {name!r}; choose from {BUILTIN}")
    d = loader()
    names = [str(n).replace(" ", "_") for n in d.feature_names]
    return LabelledSet(d.data, d.target.astype(float), names), d.target


def builtin_binary(name: str) -> LabelledSet:
    data, target = load_builtin(name)
    return LabelledSet(data.features, binarize_largest_class(target.tolist()), data.feature_names)
