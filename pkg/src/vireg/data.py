"""Synthetic imbalanced datasets, CSV ingestion, and deterministic splits."""

import csv
import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .labelspace import assign_bins

TRAIN, VAL, TEST = "train", "val", "test"

DENSITY_FAMILIES = ("exponential-decay", "pareto-like", "bimodal-skew")
LINK_FUNCTIONS = ("linear", "sinusoid", "piecewise")


class CsvFormatError(ValueError):
    """A CSV file violates the expected schema."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray          # one of TRAIN/VAL/TEST per row, or "" before split()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.labels)):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return self.labels.size

    def subset(self, tag):
        mask = self.splits == tag
        return self.features[mask], self.labels[mask]

    def label_range(self):
        return float(self.labels.min()), float(self.labels.max())


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for a skewed regression dataset.

    Labels are drawn from a decaying density on [lo, hi]; features carry the
    link of the label on the first dimension, label-independent distractors
    on the rest, plus observation noise that can optionally grow with label
    rarity.
    """

    n: int = 4000
    dim: int = 8
    lo: float = 0.0
    hi: float = 100.0
    density: str = "exponential-decay"
    shape: float = 4.0
    link: str = "linear"
    noise: float = 0.5
    heteroscedastic: bool = False
    num_bins: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n < 10:
            raise ValueError(f"need at least 10 samples, got {self.n}")
        if self.noise < 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")
        if self.density not in DENSITY_FAMILIES:
            raise ValueError(f"unknown density family {self.density!r}")
        if self.link not in LINK_FUNCTIONS:
            raise ValueError(f"unknown link function {self.link!r}")


def _sample_labels(spec, rng):
    u = rng.random(spec.n)
    if spec.density == "exponential-decay":
        # inverse CDF of pdf ~ exp(-shape * t) on t in [0, 1]
        t = -np.log1p(-u * (1.0 - math.exp(-spec.shape))) / spec.shape
    elif spec.density == "pareto-like":
        # pdf ~ (1 + shape*t)^-2 on [0, 1]; CDF(t) = t(1+c)/(1+ct)
        c = spec.shape
        t = u / (1.0 + c - c * u)
        t = np.clip(t, 0.0, 1.0)
    else:  # bimodal-skew: heavy mode near the low end, light mode high
        heavy = rng.random(spec.n) < 0.85
        t = np.where(heavy,
                     np.abs(rng.normal(0.18, 0.10, size=spec.n)),
                     rng.normal(0.75, 0.08, size=spec.n))
        t = np.clip(t, 0.0, 1.0)
    return spec.lo + t * (spec.hi - spec.lo)


def link_value(link, y, lo, hi):
    """Signal carried by the features for label y (vectorized)."""
    t = (np.asarray(y, dtype=np.float64) - lo) / (hi - lo)
    if link == "linear":
        return t
    if link == "sinusoid":
        # monotone: slope stays positive for every t
        return t + 0.08 * np.sin(6.0 * math.pi * t)
    # piecewise: three linear segments with different slopes
    return np.where(t < 0.4, 0.5 * t,
                    np.where(t < 0.7, 0.2 + 1.6 * (t - 0.4), 0.68 + 0.8 * (t - 0.7)))


def generate_synthetic(spec):
    """Deterministic synthetic dataset from a SyntheticSpec."""
    rng = np.random.default_rng(spec.seed)
    labels = _sample_labels(spec, rng)
    signal = link_value(spec.link, labels, spec.lo, spec.hi)
    features = np.tile(signal[:, None], (1, spec.dim))
    if spec.dim > 1:
        # distractor dimensions: label-independent clutter on dims 1..d-1
        features[:, 1:] += rng.normal(scale=1.0, size=(spec.n, spec.dim - 1))
    noise_scale = np.full(spec.n, spec.noise)
    if spec.heteroscedastic and spec.noise > 0:
        bins = assign_bins(labels, spec.lo, spec.hi, spec.num_bins)
        counts = np.bincount(bins, minlength=spec.num_bins)
        density = np.maximum(counts / spec.n, 1e-12)
        noise_scale = noise_scale * np.minimum(density[bins] ** -0.25, 3.0)
    if spec.noise > 0:
        features += rng.normal(size=(spec.n, spec.dim)) * noise_scale[:, None]
    return Dataset(features=features, labels=labels,
                   splits=np.full(spec.n, "", dtype="<U5"),
                   provenance={"generator": asdict(spec)})


def load_csv(path, label_column):
    """Parse a numeric CSV with a header row; bad rows are rejected per line.

    Returns (dataset, rejected) where rejected is a list of (line_number,
    reason) pairs for rows dropped due to missing or non-numeric cells.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()
    text = raw.decode("utf-8")
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError(f"{path}: empty file") from None
    header = [h.strip() for h in header]
    if label_column not in header:
        raise CsvFormatError(f"{path}: no column named {label_column!r} in header {header}")
    label_idx = header.index(label_column)
    feature_idx = [i for i in range(len(header)) if i != label_idx]
    rows, labels, rejected = [], [], []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            rejected.append((line_no, f"expected {len(header)} cells, got {len(row)}"))
            continue
        try:
            values = [float(c) for c in row]
        except ValueError as err:
            rejected.append((line_no, str(err)))
            continue
        if not all(math.isfinite(v) for v in values):
            rejected.append((line_no, "non-finite cell"))
            continue
        labels.append(values[label_idx])
        rows.append([values[i] for i in feature_idx])
    if not rows:
        raise CsvFormatError(f"{path}: no valid data rows")
    dataset = Dataset(features=np.asarray(rows, dtype=np.float64),
                      labels=np.asarray(labels, dtype=np.float64),
                      splits=np.full(len(rows), "", dtype="<U5"),
                      provenance={"path": str(path), "sha256": digest,
                                  "label_column": label_column,
                                  "rejected_rows": len(rejected)})
    return dataset, rejected


def save_csv(dataset, path, label_column="label"):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        d = dataset.features.shape[1]
        writer.writerow([label_column] + [f"x{i}" for i in range(d)])
        for y, row in zip(dataset.labels, dataset.features):
            writer.writerow([repr(float(y))] + [repr(float(v)) for v in row])


def split(dataset, fractions=(0.7, 0.15, 0.15), seed=0, balanced_test=False,
          num_bins=None, lo=None, hi=None):
    """Seeded train/val/test assignment.

    With ``balanced_test`` every non-empty label bin contributes the same
    number of test samples: the per-bin quota is the proportional share
    capped by what the rarest bin can give while keeping one sample in
    training. Remaining rows are split between train and val by their
    relative fractions.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    tags = np.full(n, "", dtype="<U5")
    if not balanced_test:
        n_train = round(fractions[0] * n)
        n_val = round(fractions[1] * n)
        tags[order[:n_train]] = TRAIN
        tags[order[n_train:n_train + n_val]] = VAL
        tags[order[n_train + n_val:]] = TEST
    else:
        if num_bins is None:
            raise ValueError("balanced_test requires num_bins")
        lo = dataset.labels.min() if lo is None else lo
        hi = dataset.labels.max() if hi is None else hi
        bins = assign_bins(dataset.labels, lo, hi, num_bins)
        counts = np.bincount(bins, minlength=num_bins)
        nonempty = counts[counts > 0]
        quota = min(int(nonempty.min()) - 1 if nonempty.min() > 1 else 1,
                    max(1, round(fractions[2] * n / nonempty.size)))
        test_idx = []
        for b in np.flatnonzero(counts > 0):
            members = order[np.isin(order, np.flatnonzero(bins == b))]
            test_idx.extend(members[:quota])
        test_idx = np.asarray(test_idx)
        tags[test_idx] = TEST
        rest = np.array([i for i in order if tags[i] == ""])
        rel = fractions[0] / (fractions[0] + fractions[1])
        n_train = round(rel * rest.size)
        tags[rest[:n_train]] = TRAIN
        tags[rest[n_train:]] = VAL
    return Dataset(features=dataset.features, labels=dataset.labels,
                   splits=tags, provenance=dict(dataset.provenance))
