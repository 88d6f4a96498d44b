"""Probabilistic representations and feature smoothing over label bins.

Each sample is encoded as a diagonal Gaussian (mean vector, variance
vector). Per-bin statistics of those statistics are kernel-smoothed across
neighboring bins and used to whiten each sample against its own bin and
recolor it with the smoothed statistics, letting sparse bins borrow from
their neighbors. Statistics are maintained as epoch-level exponential
moving averages and treated as constants by the tape (gradients flow only
through the per-sample representations).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# floor for every variance channel; keeps the whitening ratio finite when a
# bin is degenerate
EPS_VAR = 1e-6

# the recoloring ratio sqrt(smoothed/raw) is clipped into
# [1/MAX_WHITEN_SCALE, MAX_WHITEN_SCALE]: a near-empty bin's clamped spread
# would otherwise rescale its samples by hundreds
MAX_WHITEN_SCALE = 10.0

# spread estimates need at least this many samples to update running values
MIN_SPREAD_COUNT = 2


class DivergenceError(RuntimeError):
    """Training produced non-finite values."""


@dataclass
class BinStats:
    """Per-bin statistics of the per-sample Gaussian representations.

    ``mean``/``var`` are the expected bin mean and expected within-bin
    variance; ``mean_var`` is the sampling variance of the bin mean. All
    three are (B, D) arrays; ``count`` is the (B,) sample count.
    """

    mean: np.ndarray
    mean_var: np.ndarray
    var: np.ndarray
    count: np.ndarray

    def copy(self):
        return BinStats(self.mean.copy(), self.mean_var.copy(),
                        self.var.copy(), self.count.copy())


@dataclass
class SmoothedBinStats:
    mean: np.ndarray
    mean_var: np.ndarray
    var: np.ndarray


def encode(features, weight, bias, latent_dim):
    """Affine map to a (mean, variance) pair; variances softplus-positive.

    ``features`` is an (n, F) node and the affine output must have 2*latent_dim
    columns: the first half is the mean, the second half passes through
    softplus(., beta=1) plus the variance floor.
    """
    out = ad.matmul(features, weight) + bias
    if out.value.shape[1] != 2 * latent_dim:
        raise ValueError(f"encoder output has {out.value.shape[1]} columns, "
                         f"expected {2 * latent_dim}")
    if not np.all(np.isfinite(out.value)):
        raise DivergenceError("non-finite encoder activations")
    mu = ad.narrow(out, 1, 0, latent_dim)
    var = ad.softplus(ad.narrow(out, 1, latent_dim, latent_dim), beta=1.0) + EPS_VAR
    return mu, var


def bin_statistics(mu, var, bins, num_bins):
    """Exact per-bin statistics from (n, D) arrays of means and variances.

    Empty bins keep zero statistics and a zero count; callers fall back to
    running or global values for them.
    """
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    bins = np.asarray(bins)
    D = mu.shape[1]
    count = np.bincount(bins, minlength=num_bins).astype(np.float64)
    sum_mu = np.zeros((num_bins, D))
    sum_var = np.zeros((num_bins, D))
    sum_musq = np.zeros((num_bins, D))
    np.add.at(sum_mu, bins, mu)
    np.add.at(sum_var, bins, var)
    np.add.at(sum_musq, bins, mu * mu)
    seen = count > 0
    n = count[seen][:, None]
    mean = np.zeros((num_bins, D))
    mean_var = np.zeros((num_bins, D))
    second = np.zeros((num_bins, D))
    mean[seen] = sum_mu[seen] / n
    mean_var[seen] = sum_var[seen] / (n * n)
    second[seen] = (sum_var[seen] + sum_musq[seen]) / n
    spread = second - (mean_var + mean * mean)
    spread[seen] = np.maximum(spread[seen], EPS_VAR)
    spread[~seen] = 0.0
    return BinStats(mean=mean, mean_var=mean_var, var=spread, count=count)


def merge_bin_statistics(parts):
    """Count-weighted merge of BinStats computed on disjoint sample groups."""
    num_bins, D = parts[0].mean.shape
    count = sum(p.count for p in parts)
    sum_mu = sum(p.mean * p.count[:, None] for p in parts)
    sum_var = sum(p.mean_var * (p.count**2)[:, None] for p in parts)
    sum_second = sum((p.var + p.mean_var + p.mean**2) * p.count[:, None] for p in parts)
    seen = count > 0
    n = count[seen][:, None]
    mean = np.zeros((num_bins, D))
    mean_var = np.zeros((num_bins, D))
    spread = np.zeros((num_bins, D))
    mean[seen] = sum_mu[seen] / n
    mean_var[seen] = sum_var[seen] / (n * n)
    spread[seen] = np.maximum(sum_second[seen] / n - (mean_var[seen] + mean[seen]**2), EPS_VAR)
    return BinStats(mean=mean, mean_var=mean_var, var=spread, count=count)


def smooth_statistics(stats, kernel):
    """Kernel-smooth the per-bin statistics across neighboring bins.

    Means and variances mix with the normalized window weights; the
    variance-of-the-mean channel mixes with their squares (variances of a
    convex combination), which deliberately contracts it.
    """
    W = kernel.weight_matrix(stats.mean.shape[0])
    return SmoothedBinStats(
        mean=W @ stats.mean,
        mean_var=(W * W) @ stats.mean_var,
        var=np.maximum(W @ stats.var, EPS_VAR),
    )


def whiten_recolor(mu, var, bins, stats, smoothed):
    """Standardize each sample by its bin's statistics, re-express in the
    smoothed ones. Statistics enter as constants: the tape sees only the
    per-sample mean/variance path.
    """
    bins = np.asarray(bins)
    scale = np.sqrt(smoothed.var[bins] / stats.var[bins])
    scale = np.clip(scale, 1.0 / MAX_WHITEN_SCALE, MAX_WHITEN_SCALE)
    new_mu = (mu - ad.constant(stats.mean[bins])) * ad.constant(scale) \
        + ad.constant(smoothed.mean[bins])
    new_var = (var + ad.constant(stats.mean_var[bins])) * ad.constant(scale) \
        + ad.constant(smoothed.mean_var[bins])
    return new_mu, new_var


def reparameterize(mu, var, noise):
    """Sample z = mean + sqrt(variance) * noise, differentiably."""
    return mu + ad.sqrt(var) * ad.constant(noise)


def kl_to_standard_normal(mu, var):
    """Per-sample KL(N(mu, diag var) || N(0, I)) for (n, D) nodes; returns (n,)."""
    terms = var + ad.square(mu) - 1.0 - ad.log(var)
    return ad.reduce_sum(terms, axis=1) * 0.5


class RunningStats:
    """Epoch-level EMA of the bin statistics plus their smoothed versions.

    Initialized from the first epoch: bins seen that epoch take their
    own statistics, all remaining bins take the global (all-samples-one-bin)
    statistics so that no bin is ever without usable values.
    """

    def __init__(self, num_bins, latent_dim, kernel, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.num_bins = num_bins
        self.latent_dim = latent_dim
        self.kernel = kernel
        self.momentum = momentum
        self.initialized = False
        self.stats = BinStats(mean=np.zeros((num_bins, latent_dim)),
                              mean_var=np.zeros((num_bins, latent_dim)),
                              var=np.full((num_bins, latent_dim), EPS_VAR),
                              count=np.zeros(num_bins))
        self.smoothed = smooth_statistics(self.stats, kernel)

    def update(self, epoch_stats, global_stats=None):
        """Fold one epoch's statistics into the running values.

        ``global_stats`` (a one-bin BinStats over all samples) seeds bins
        that have never been observed; it is required on the first call.
        """
        seen = epoch_stats.count > 0
        # a lone sample carries no spread information, so the var channel
        # only listens to bins with enough samples
        spread_ok = epoch_stats.count >= MIN_SPREAD_COUNT
        if not self.initialized:
            if global_stats is None:
                raise ValueError("first update requires global statistics")
            self.stats.mean[:] = global_stats.mean[0]
            self.stats.mean_var[:] = global_stats.mean_var[0]
            self.stats.var[:] = global_stats.var[0]
            self.stats.mean[seen] = epoch_stats.mean[seen]
            self.stats.mean_var[seen] = epoch_stats.mean_var[seen]
            self.stats.var[spread_ok] = epoch_stats.var[spread_ok]
            self.initialized = True
        else:
            m = self.momentum
            self.stats.mean[seen] = m * self.stats.mean[seen] + (1 - m) * epoch_stats.mean[seen]
            self.stats.mean_var[seen] = (m * self.stats.mean_var[seen]
                                         + (1 - m) * epoch_stats.mean_var[seen])
            self.stats.var[spread_ok] = np.maximum(
                m * self.stats.var[spread_ok] + (1 - m) * epoch_stats.var[spread_ok],
                EPS_VAR)
        self.stats.count = self.stats.count + epoch_stats.count
        self.smoothed = smooth_statistics(self.stats, self.kernel)

    def state_dict(self):
        return {
            "num_bins": self.num_bins,
            "latent_dim": self.latent_dim,
            "momentum": self.momentum,
            "initialized": self.initialized,
            "mean": self.stats.mean.tolist(),
            "mean_var": self.stats.mean_var.tolist(),
            "var": self.stats.var.tolist(),
            "count": self.stats.count.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state, kernel):
        obj = cls(state["num_bins"], state["latent_dim"], kernel, momentum=state["momentum"])
        obj.initialized = bool(state["initialized"])
        obj.stats = BinStats(mean=np.asarray(state["mean"], dtype=np.float64),
                             mean_var=np.asarray(state["mean_var"], dtype=np.float64),
                             var=np.asarray(state["var"], dtype=np.float64),
                             count=np.asarray(state["count"], dtype=np.float64))
        obj.smoothed = smooth_statistics(obj.stats, kernel)
        return obj


def global_statistics(mu, var):
    """All samples pooled into a single bin; used to seed unseen bins."""
    n = mu.shape[0]
    return bin_statistics(mu, var, np.zeros(n, dtype=np.int64), 1)
