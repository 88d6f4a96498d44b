"""Executable risk-estimator theory on tiny synthetic populations.

A world is a per-bin population of bounded losses plus per-bin observation
propensities. The naive, inverse-propensity, and smoothed-propensity risk
estimators are evaluated against the true risk, exactly (by enumerating
every observation pattern) on small worlds and by Monte Carlo on larger
ones, together with the bias/variance terms of the generalization bound
and the tail bound on estimator deviation.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .labelspace import Kernel, kernel_smooth

EXHAUSTIVE_SAMPLE_CAP = 12
MIN_PROPENSITY = 1e-6


@dataclass(frozen=True)
class RiskWorld:
    """Populations, propensities, and their smoothed counterparts."""

    losses: tuple          # one float64 array of losses per bin
    propensities: np.ndarray
    smoothed: np.ndarray
    delta_max: float

    def __post_init__(self):
        if len(self.losses) != self.propensities.size or \
                len(self.losses) != self.smoothed.size:
            raise ValueError("losses, propensities, and smoothed lengths differ")
        for arr in self.losses:
            if arr.size == 0:
                raise ValueError("every bin population must be non-empty")
            if np.any(arr < 0) or np.any(arr > self.delta_max):
                raise ValueError(f"losses must lie in [0, {self.delta_max}]")
        for vec, name in ((self.propensities, "propensities"),
                          (self.smoothed, "smoothed propensities")):
            if np.any(vec <= 0) or np.any(vec > 1):
                raise ValueError(f"{name} must lie in (0, 1]")

    @property
    def num_bins(self):
        return len(self.losses)

    @property
    def num_samples(self):
        return sum(arr.size for arr in self.losses)

    def sample_bins(self):
        """Flat bin index per sample, bin-major order."""
        return np.concatenate([np.full(arr.size, i, dtype=np.int64)
                               for i, arr in enumerate(self.losses)])

    def sample_losses(self):
        return np.concatenate(self.losses)

    def sample_propensities(self):
        return self.propensities[self.sample_bins()]


def make_world(losses_per_bin, propensities, smoothed=None, delta_max=None, kernel=None):
    losses = tuple(np.asarray(arr, dtype=np.float64) for arr in losses_per_bin)
    propensities = np.asarray(propensities, dtype=np.float64)
    if delta_max is None:
        delta_max = max(float(arr.max()) for arr in losses)
    if smoothed is None:
        smoothed = smooth_propensities(propensities, kernel or Kernel())
    return RiskWorld(losses=losses, propensities=propensities,
                     smoothed=np.asarray(smoothed, dtype=np.float64),
                     delta_max=float(delta_max))


def smooth_propensities(propensities, kernel):
    """The training-time smoothing applied to a propensity vector.

    Propensities are per-bin probabilities rather than a distribution, so
    the normalized-window convolution is used directly and the result is
    clipped back into (0, 1].
    """
    smoothed = kernel_smooth(np.asarray(propensities, dtype=np.float64), kernel)
    return np.clip(smoothed, MIN_PROPENSITY, 1.0)


def true_risk(world):
    """Bin-balanced mean loss over the full populations."""
    return float(np.mean([arr.mean() for arr in world.losses]))


def naive_estimator(world, observed):
    """Plain mean of observed losses; None when nothing is observed."""
    observed = np.asarray(observed, dtype=bool)
    if not observed.any():
        return None
    return float(world.sample_losses()[observed].mean())


def ips_estimator(world, observed):
    """Inverse-propensity estimator (unbiased)."""
    return _weighted_estimator(world, observed, world.propensities)


def vir_estimator(world, observed):
    """Propensity-smoothed estimator (biased, lower variance when imbalanced)."""
    return _weighted_estimator(world, observed, world.smoothed)


def _weighted_estimator(world, observed, denominators):
    observed = np.asarray(observed, dtype=bool)
    bins = world.sample_bins()
    losses = world.sample_losses()
    sizes = np.array([arr.size for arr in world.losses], dtype=np.float64)
    contrib = np.where(observed, losses / denominators[bins] / sizes[bins], 0.0)
    return float(contrib.sum() / world.num_bins)


def expected_vir(world):
    """Closed-form expectation of the smoothed estimator over observation draws."""
    total = 0.0
    for i, arr in enumerate(world.losses):
        total += arr.mean() * world.propensities[i] / world.smoothed[i]
    return total / world.num_bins


def enumerate_patterns(world):
    """Yield (probability, observed mask) over every observation pattern."""
    n = world.num_samples
    if n > EXHAUSTIVE_SAMPLE_CAP:
        raise ValueError(f"exhaustive enumeration capped at {EXHAUSTIVE_SAMPLE_CAP} "
                         f"samples, world has {n}")
    p = world.sample_propensities()
    for bits in itertools.product((False, True), repeat=n):
        mask = np.asarray(bits)
        prob = float(np.prod(np.where(mask, p, 1.0 - p)))
        yield prob, mask


def exhaustive_moments(world, estimator):
    """Exact mean and variance of an estimator over all observation patterns.

    Patterns where the estimator is undefined (the naive estimator with no
    observations) are excluded and the probability mass renormalized.
    """
    mean_acc, sq_acc, mass = 0.0, 0.0, 0.0
    for prob, mask in enumerate_patterns(world):
        value = estimator(world, mask)
        if value is None:
            continue
        mean_acc += prob * value
        sq_acc += prob * value * value
        mass += prob
    mean = mean_acc / mass
    var = sq_acc / mass - mean * mean
    return mean, max(var, 0.0)


@dataclass(frozen=True)
class BoundReport:
    bias_term: float
    variance_term: float
    total: float | None


def theorem_bound(world, hypothesis_count=1, eta=0.05, observed=None):
    """Bias and variance terms of the generalization bound.

    The total bound (estimate + bias + variance) is only defined once an
    observation pattern supplies the estimate itself.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must be in (0, 1), got {eta}")
    if hypothesis_count < 1:
        raise ValueError(f"hypothesis count must be >= 1, got {hypothesis_count}")
    B = world.num_bins
    d = world.delta_max
    bias = d / B * float(np.sum(np.abs(1.0 - world.propensities / world.smoothed)))
    variance = (d / B * math.sqrt(math.log(2.0 * hypothesis_count / eta) / 2.0)
                * math.sqrt(float(np.sum(1.0 / world.smoothed ** 2))))
    total = None
    if observed is not None:
        total = vir_estimator(world, observed) + bias + variance
    return BoundReport(bias_term=bias, variance_term=variance, total=total)


@dataclass
class McEstimatorStats:
    mean: float
    var: float
    std_err: float


@dataclass
class McReport:
    draws: int
    eta: float
    stats: dict                 # estimator name -> McEstimatorStats
    vir_expectation: float
    deviation_bound: float
    violation_fraction: float   # of the tail bound, for the smoothed estimator
    naive_undefined_fraction: float


def mc_experiment(world, num_draws, seed, eta=0.05, hypothesis_count=1):
    """Monte Carlo over observation patterns drawn Bernoulli(P_i) per sample.

    Reports empirical moments for all three estimators plus how often the
    smoothed estimator deviates from its expectation by more than the tail
    bound at confidence 1 - eta (should happen with frequency <= eta).
    """
    if num_draws < 1:
        raise ValueError("num_draws must be >= 1")
    rng = np.random.default_rng(seed)
    p = world.sample_propensities()
    bound = theorem_bound(world, hypothesis_count, eta).variance_term
    center = expected_vir(world)
    values = {"naive": [], "ips": [], "vir": []}
    violations = 0
    undefined = 0
    for _ in range(num_draws):
        mask = rng.random(p.size) < p
        naive = naive_estimator(world, mask)
        if naive is None:
            undefined += 1
        else:
            values["naive"].append(naive)
        values["ips"].append(ips_estimator(world, mask))
        v = vir_estimator(world, mask)
        values["vir"].append(v)
        if abs(v - center) > bound:
            violations += 1
    stats = {}
    for name, vals in values.items():
        arr = np.asarray(vals)
        if arr.size == 0:
            stats[name] = McEstimatorStats(float("nan"), float("nan"), float("nan"))
            continue
        var = float(arr.var())
        stats[name] = McEstimatorStats(mean=float(arr.mean()), var=var,
                                       std_err=math.sqrt(var / arr.size))
    return McReport(draws=num_draws, eta=eta, stats=stats,
                    vir_expectation=center, deviation_bound=bound,
                    violation_fraction=violations / num_draws,
                    naive_undefined_fraction=undefined / num_draws)


def random_world(rng, num_bins=3, max_bin_size=3, delta_max=1.0,
                 propensity_low=0.02, propensity_high=0.95,
                 force_rare=None, loss_family="uniform", kernel=None):
    """Seeded world generator for estimator experiments.

    ``force_rare`` pins the minimum propensity (the imbalanced regime is
    min P <= 0.05); losses come from uniform[0, delta] or a two-point
    family at 0.1 and 0.9 of delta.
    """
    sizes = rng.integers(1, max_bin_size + 1, size=num_bins)
    losses = []
    for s in sizes:
        if loss_family == "uniform":
            losses.append(rng.uniform(0.0, delta_max, size=s))
        elif loss_family == "two-point":
            losses.append(rng.choice([0.1 * delta_max, 0.9 * delta_max], size=s))
        else:
            raise ValueError(f"unknown loss family {loss_family!r}")
    props = rng.uniform(propensity_low, propensity_high, size=num_bins)
    if force_rare is not None:
        props[rng.integers(num_bins)] = force_rare
    return make_world(losses, props, delta_max=delta_max, kernel=kernel or Kernel())


def canonical_two_bin_world():
    """The two-bin reference world used across the documentation and tests."""
    return RiskWorld(losses=(np.array([0.2, 0.4]), np.array([0.6])),
                     propensities=np.array([0.8, 0.2]),
                     smoothed=np.array([0.6, 0.4]),
                     delta_max=0.6)
