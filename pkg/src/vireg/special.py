"""Scalar special functions on float64 arrays.

These are the plain numpy kernels; the autodiff wrappers in
:mod:`vireg.autodiff` call into them for both the forward values and the
adjoints (digamma, logistic).
"""

import numpy as np

LOG_SQRT_TWO_PI = 0.5 * np.log(2.0 * np.pi)
EULER_GAMMA = 0.5772156649015328606

# Lanczos approximation, g=7, 9 coefficients (Godfrey's table).
_LANCZOS_G = 7.0
_LANCZOS_COEFFS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


def lgamma(x):
    """Natural log of the Gamma function for x > 0, elementwise.

    Uses the g=7 Lanczos series directly for x >= 0.5 and the reflection
    formula below that. Raises DomainError on any non-positive input.
    """
    scalar = np.isscalar(x) or np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(x <= 0.0):
        bad = np.min(x)
        raise DomainError(f"lgamma requires x > 0, got minimum value {bad}")
    out = np.empty_like(x)
    small = x < 0.5
    if np.any(small):
        xs = x[small]
        # log Gamma(x) = log(pi / sin(pi x)) - log Gamma(1 - x)
        out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lanczos(1.0 - xs)
    rest = ~small
    if np.any(rest):
        out[rest] = _lanczos(x[rest])
    return float(out[0]) if scalar else out


def _lanczos(x):
    # valid for x >= 0.5
    acc = np.full_like(x, _LANCZOS_COEFFS[0])
    for k in range(1, len(_LANCZOS_COEFFS)):
        acc = acc + _LANCZOS_COEFFS[k] / (x - 1.0 + k)
    t = x + _LANCZOS_G - 0.5
    return LOG_SQRT_TWO_PI + (x - 0.5) * np.log(t) - t + np.log(acc)


# Asymptotic tail of psi(x): log x - 1/(2x) - sum B_2n / (2n x^2n).
_DIGAMMA_TAIL = (1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0,
                 1.0 / 132.0, -691.0 / 32760.0)


def digamma(x):
    """Derivative of lgamma for x > 0, elementwise.

    Shifts the argument above 6 with psi(x) = psi(x+1) - 1/x, then applies
    the asymptotic series.
    """
    scalar = np.isscalar(x) or np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(x <= 0.0):
        raise DomainError(f"digamma requires x > 0, got minimum value {np.min(x)}")
    x = x.astype(np.float64, copy=True)
    shift = np.zeros_like(x)
    while True:
        small = x < 6.0
        if not np.any(small):
            break
        shift[small] -= 1.0 / x[small]
        x[small] += 1.0
    inv2 = 1.0 / (x * x)
    tail = np.zeros_like(x)
    power = inv2.copy()
    for coeff in _DIGAMMA_TAIL:
        tail -= coeff * power
        power = power * inv2
    out = shift + np.log(x) - 0.5 / x + tail
    return float(out[0]) if scalar else out


def softplus(x, beta=1.0):
    """Overflow-safe (1/beta) * log(1 + exp(beta * x)), elementwise."""
    if beta <= 0.0:
        raise ValueError(f"softplus requires beta > 0, got {beta}")
    scalar = np.isscalar(x) or np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-beta * np.abs(x))) / beta
    return float(out) if scalar else out


def logistic(x):
    """1 / (1 + exp(-x)) without overflow, elementwise."""
    scalar = np.isscalar(x) or np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if scalar else out
