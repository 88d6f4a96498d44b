"""Evidential regression heads over the Normal-Inverse-Gamma family.

The reweighted head turns network outputs into pseudo-observations of an
NIG prior: the predicted pseudo-count is scaled by the label-rarity weight
before the conjugate update, so minority samples contribute more virtual
evidence. Training minimizes the Student-t form negative log likelihood of
the resulting posterior plus an error-scaled evidence regularizer. The
plain four-parameter head serves as the unweighted baseline.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# posterior shape is kept at or above this, which also keeps the
# predictive variance finite
ALPHA_FLOOR = 1.5

# minimum pseudo-count produced by the head
MIN_PSEUDO_COUNT = 2.0

# softplus sharpness for all head activations
HEAD_SOFTPLUS_BETA = 0.1


@dataclass(frozen=True)
class NIGPrior:
    """Prior (loc, evidence, shape, scale) for the conjugate update."""

    gamma: float = 0.0
    nu: float = 1.0
    alpha: float = 2.0
    beta: float = 1.0

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError(f"prior nu must be positive, got {self.nu}")
        if self.alpha <= 1:
            raise ValueError(f"prior alpha must exceed 1, got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"prior beta must be positive, got {self.beta}")


@dataclass
class HeadOutputs:
    """Pseudo-observation summary emitted by the reweighted head.

    ``count`` >= 2 virtual observations, ``mean`` their average, and
    ``sum_sq`` the non-negative residual mass they carry.
    """

    count: ad.Node
    mean: ad.Node
    sum_sq: ad.Node


@dataclass
class NIGPosterior:
    gamma: ad.Node
    nu: ad.Node
    alpha: ad.Node
    beta: ad.Node


def head_forward(z, weight, bias):
    """Map latent features (n, D) through an affine layer to HeadOutputs."""
    raw = ad.matmul(z, weight) + bias
    if not np.all(np.isfinite(raw.value)):
        raise ad.DomainError("non-finite head outputs")
    count = ad.softplus(ad.reshape(ad.narrow(raw, 1, 0, 1), (-1,)),
                        beta=HEAD_SOFTPLUS_BETA) + MIN_PSEUDO_COUNT
    mean = ad.reshape(ad.narrow(raw, 1, 1, 1), (-1,))
    sum_sq = ad.softplus(ad.reshape(ad.narrow(raw, 1, 2, 1), (-1,)),
                         beta=HEAD_SOFTPLUS_BETA)
    return HeadOutputs(count=count, mean=mean, sum_sq=sum_sq)


def nig_posterior(out, prior, weight):
    """Conjugate NIG update with the pseudo-count scaled by the rarity weight.

    ``weight`` is a positive per-sample array (or scalar); it multiplies the
    pseudo-count in the location, evidence, and shape updates but leaves the
    scale update untouched.
    """
    w = np.asarray(weight, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("importance weights must be positive")
    wn = ad.constant(w) * out.count
    nu = wn + prior.nu
    gamma = (wn * out.mean + prior.gamma * prior.nu) / nu
    alpha = ad.maximum(wn * 0.5 + prior.alpha, ALPHA_FLOOR)
    beta = out.sum_sq + (prior.beta + 0.5 * prior.gamma**2 * prior.nu)
    return NIGPosterior(gamma=gamma, nu=nu, alpha=alpha, beta=beta)


def predict(post):
    """Point prediction (posterior loc) and predictive variance."""
    y_hat = post.gamma.value
    alpha = post.alpha.value
    if np.any(alpha <= 1.0):
        raise AssertionError("posterior alpha <= 1 should be impossible")
    s_hat = post.beta.value / (post.nu.value * (alpha - 1.0))
    return y_hat, s_hat


def nig_nll(gamma, nu, alpha, beta, y):
    """Student-t form negative log likelihood of an NIG posterior at y.

    Shared by the reweighted head and the plain baseline head; only the
    parameter definitions differ. Fully differentiable in all four
    parameters.
    """
    y = ad.as_node(y)
    omega = 2.0 * beta * (nu + 1.0)
    resid = ad.square(y - gamma) * nu + omega
    return (0.5 * (math.log(math.pi) - ad.log(nu))
            + (alpha + 0.5) * ad.log(resid)
            - alpha * ad.log(omega)
            + ad.lgamma(alpha) - ad.lgamma(alpha + 0.5))


def vir_nll(post, y):
    """NLL of the reweighted posterior (per-sample node)."""
    return nig_nll(post.gamma, post.nu, post.alpha, post.beta, y)


def evidential_regularizer(post, y):
    """(nu + 2*alpha) * |y - loc|: penalizes confident evidence on wrong predictions."""
    y = ad.as_node(y)
    return (post.nu + 2.0 * post.alpha) * ad.absolute(y - post.gamma)


def der_head_forward(features, weight, bias):
    """Plain four-parameter evidential head (unweighted baseline)."""
    raw = ad.matmul(features, weight) + bias
    if not np.all(np.isfinite(raw.value)):
        raise ad.DomainError("non-finite head outputs")
    cols = [ad.reshape(ad.narrow(raw, 1, i, 1), (-1,)) for i in range(4)]
    gamma = cols[0]
    nu = ad.softplus(cols[1], beta=HEAD_SOFTPLUS_BETA)
    alpha = ad.softplus(cols[2], beta=HEAD_SOFTPLUS_BETA) + ALPHA_FLOOR
    beta = ad.softplus(cols[3], beta=HEAD_SOFTPLUS_BETA)
    return NIGPosterior(gamma=gamma, nu=nu, alpha=alpha, beta=beta)


def der_nll(gamma, nu, alpha, beta, y):
    """Baseline NLL; identical functional form, raw parameters."""
    return nig_nll(gamma, nu, alpha, beta, y)


def student_t_logpdf(y, loc, scale, dof):
    """Reference log density of the Student-t distribution (plain numpy)."""
    from . import special
    y, loc, scale, dof = (np.asarray(v, dtype=np.float64) for v in (y, loc, scale, dof))
    z = (y - loc) / scale
    return (special.lgamma((dof + 1.0) / 2.0) - special.lgamma(dof / 2.0)
            - 0.5 * np.log(np.pi * dof) - np.log(scale)
            - (dof + 1.0) / 2.0 * np.log1p(z * z / dof))
