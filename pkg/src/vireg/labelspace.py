"""Equal-interval label binning, kernel density smoothing, and importance weights.

The label range [lo, hi] is cut into ``num_bins`` equal-width bins; the
empirical bin histogram is convolved with a symmetric kernel to produce an
effective ("smoothed") density, whose inverse square root gives the
per-bin training weights. Bins are also partitioned into many/medium/few
shot regions by raw training count.
"""

import json
from dataclasses import dataclass, field

import numpy as np

GAUSSIAN = "gaussian"
LAPLACIAN = "laplacian"
TRIANGULAR = "triangular"

MANY, MEDIUM, FEW, EMPTY = "many", "medium", "few", "empty"


@dataclass(frozen=True)
class Kernel:
    """Symmetric smoothing kernel over bin indices.

    ``bandwidth`` is measured in bin-index units and ``radius`` is the
    half-width of the truncated window, so a radius of 2 covers five bins.
    """

    family: str = GAUSSIAN
    bandwidth: float = 2.0
    radius: int = 2

    def __post_init__(self):
        if self.family not in (GAUSSIAN, LAPLACIAN, TRIANGULAR):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.bandwidth <= 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.bandwidth}")
        if self.radius < 0:
            raise ValueError(f"kernel radius must be >= 0, got {self.radius}")

    def raw(self, dist):
        """Unnormalized weight at integer bin distance(s) ``dist``."""
        d = np.abs(np.asarray(dist, dtype=np.float64))
        if self.family == GAUSSIAN:
            return np.exp(-d * d / (2.0 * self.bandwidth ** 2))
        if self.family == LAPLACIAN:
            return np.exp(-d / self.bandwidth)
        return np.maximum(0.0, 1.0 - d / self.bandwidth)

    def weight_matrix(self, num_bins):
        """(B, B) matrix W with W[b, b'] the normalized window weight.

        Row b holds the kernel weights of b's (boundary-truncated) window,
        normalized to sum to one; entries outside the window are zero.
        """
        w = np.zeros((num_bins, num_bins))
        offsets = np.arange(-self.radius, self.radius + 1)
        raw = self.raw(offsets)
        for b in range(num_bins):
            cols = b + offsets
            ok = (cols >= 0) & (cols < num_bins)
            vals = raw[ok]
            total = vals.sum()
            if total <= 0.0:
                w[b, b] = 1.0
            else:
                w[b, cols[ok]] = vals / total
        return w


def kernel_smooth(values, kernel):
    """Convolve per-bin values with the normalized-window kernel weights.

    Works on a (B,) vector or a (B, D) matrix of per-bin rows. This is the
    shared smoothing primitive; densities additionally renormalize their
    total mass afterwards (see smooth_density).
    """
    values = np.asarray(values, dtype=np.float64)
    return kernel.weight_matrix(values.shape[0]) @ values


def smooth_density(density, kernel):
    """Kernel-smoothed density: normalized-window convolution, mass restored to 1."""
    density = np.asarray(density, dtype=np.float64)
    total = density.sum()
    if not np.isclose(total, 1.0, rtol=0, atol=1e-9):
        raise ValueError(f"smooth_density expects a normalized density, got sum {total}")
    smoothed = kernel_smooth(density, kernel)
    return smoothed / smoothed.sum()


def assign_bin(y, lo, hi, num_bins):
    """Index of the equal-interval bin that contains y; hi maps to the last bin."""
    if y < lo or y > hi:
        raise ValueError(f"label {y} outside range [{lo}, {hi}]")
    b = int((y - lo) / (hi - lo) * num_bins)
    return min(b, num_bins - 1)


def assign_bins(labels, lo, hi, num_bins):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size and (labels.min() < lo or labels.max() > hi):
        raise ValueError(f"labels outside range [{lo}, {hi}]: "
                         f"min {labels.min()}, max {labels.max()}")
    b = ((labels - lo) / (hi - lo) * num_bins).astype(np.int64)
    return np.minimum(b, num_bins - 1)


def empirical_density(labels, lo, hi, num_bins):
    """Per-bin fraction of the given labels (sums to one)."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("empirical_density requires at least one label")
    counts = np.bincount(assign_bins(labels, lo, hi, num_bins), minlength=num_bins)
    return counts / labels.size, counts


def importance_weights(smoothed_density, counts):
    """Inverse square-root weights, rescaled to count-weighted mean one.

    The rescaling keeps the effective learning rate independent of the
    overall density scale.
    """
    smoothed_density = np.asarray(smoothed_density, dtype=np.float64)
    counts = np.asarray(counts)
    if np.any((counts > 0) & (smoothed_density <= 0.0)):
        raise ValueError("smoothed density is zero on a populated bin; "
                         "increase the kernel window radius")
    covered = smoothed_density > 0.0
    raw = np.zeros_like(smoothed_density)
    raw[covered] = smoothed_density[covered] ** -0.5
    # bins with no density even after smoothing are pure extrapolation at
    # evaluation time; treat them like the rarest covered bin
    if np.any(~covered):
        raw[~covered] = raw[covered].max()
    scale = float((counts * raw).sum()) / counts.sum()
    return raw / scale


def default_shot_thresholds(n_samples):
    """(t_many, t_few): the standard (100, 20) once the dataset is large enough."""
    if n_samples >= 5000:
        return 100, 20
    return max(2, round(n_samples / 50)), max(1, round(n_samples / 250))


@dataclass(frozen=True)
class ShotRegions:
    """Per-bin many/medium/few/empty labels from raw training counts."""

    labels: tuple
    t_many: int
    t_few: int

    def mask(self, bins, region):
        labels = np.asarray(self.labels)
        return labels[np.asarray(bins)] == region


def partition_shots(counts, t_many=100, t_few=20):
    if t_few > t_many:
        raise ValueError(f"t_few ({t_few}) must not exceed t_many ({t_many})")
    labels = []
    for c in np.asarray(counts):
        if c == 0:
            labels.append(EMPTY)
        elif c > t_many:
            labels.append(MANY)
        elif c < t_few:
            labels.append(FEW)
        else:
            labels.append(MEDIUM)
    return ShotRegions(labels=tuple(labels), t_many=int(t_many), t_few=int(t_few))


@dataclass(frozen=True)
class LabelSpace:
    """Binned view of the label range with densities, weights, and regions."""

    lo: float
    hi: float
    num_bins: int
    kernel: Kernel
    edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray
    smoothed: np.ndarray
    weights: np.ndarray
    regions: ShotRegions = field(repr=False)

    @classmethod
    def from_labels(cls, labels, lo, hi, num_bins, kernel=None,
                    t_many=None, t_few=None):
        if hi <= lo:
            raise ValueError(f"label range requires hi > lo, got [{lo}, {hi}]")
        if num_bins < 1:
            raise ValueError(f"num_bins must be >= 1, got {num_bins}")
        kernel = kernel or Kernel()
        labels = np.asarray(labels, dtype=np.float64)
        density, counts = empirical_density(labels, lo, hi, num_bins)
        smoothed = smooth_density(density, kernel)
        weights = importance_weights(smoothed, counts)
        if t_many is None or t_few is None:
            d_many, d_few = default_shot_thresholds(labels.size)
            t_many = d_many if t_many is None else t_many
            t_few = d_few if t_few is None else t_few
        regions = partition_shots(counts, t_many=t_many, t_few=t_few)
        edges = np.linspace(lo, hi, num_bins + 1)
        return cls(lo=float(lo), hi=float(hi), num_bins=int(num_bins), kernel=kernel,
                   edges=edges, counts=counts, density=density, smoothed=smoothed,
                   weights=weights, regions=regions)

    def bin_of(self, y):
        return assign_bin(y, self.lo, self.hi, self.num_bins)

    def bins_of(self, labels):
        return assign_bins(labels, self.lo, self.hi, self.num_bins)

    def weights_of(self, labels):
        return self.weights[self.bins_of(labels)]

    def region_names(self, labels):
        bins = self.bins_of(labels)
        return np.asarray(self.regions.labels)[bins]

    def to_json_dict(self):
        return {
            "lo": self.lo,
            "hi": self.hi,
            "num_bins": self.num_bins,
            "kernel": {"family": self.kernel.family,
                       "bandwidth": self.kernel.bandwidth,
                       "radius": self.kernel.radius},
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "density": self.density.tolist(),
            "smoothed_density": self.smoothed.tolist(),
            "weights": self.weights.tolist(),
            "shot_regions": list(self.regions.labels),
            "thresholds": {"t_many": self.regions.t_many, "t_few": self.regions.t_few},
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        kernel = Kernel(**doc["kernel"])
        regions = ShotRegions(labels=tuple(doc["shot_regions"]),
                              t_many=doc["thresholds"]["t_many"],
                              t_few=doc["thresholds"]["t_few"])
        return cls(lo=doc["lo"], hi=doc["hi"], num_bins=doc["num_bins"], kernel=kernel,
                   edges=np.asarray(doc["edges"]), counts=np.asarray(doc["counts"]),
                   density=np.asarray(doc["density"]),
                   smoothed=np.asarray(doc["smoothed_density"]),
                   weights=np.asarray(doc["weights"]), regions=regions)
