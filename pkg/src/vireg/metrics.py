"""Accuracy and uncertainty metrics with shot-region breakdown.

Accuracy metrics are MAE, MSE, the geometric mean of absolute errors, and
the two correlation coefficients; uncertainty metrics are the predictive
negative log likelihood and the area under the sparsification error curve
(AUSE). Everything reports per shot region as well as overall, and the
posterior scale weights can be calibrated on a validation split.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import special
from .labelspace import MANY, MEDIUM, FEW

EPS_GM = 1e-10
REGION_ORDER = ("all", MANY, MEDIUM, FEW)


def _check_pair(predictions, labels):
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("metrics require at least one sample")
    return predictions, labels


def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.arange(values.size, dtype=np.float64)
    # ties share the mean of the ranks they would occupy
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


def pearson(a, b):
    a, b = _check_pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return float("nan")
    return float((da * db).sum() / denom)


def spearman(a, b):
    a, b = _check_pair(a, b)
    return pearson(_average_ranks(a), _average_ranks(b))


def regression_metrics(predictions, labels):
    """MAE, MSE, GM, Pearson, Spearman as a plain dict."""
    predictions, labels = _check_pair(predictions, labels)
    err = np.abs(predictions - labels)
    return {
        "mae": float(err.mean()),
        "mse": float((err * err).mean()),
        "gm": float(np.exp(np.log(err + EPS_GM).mean())),
        "pearson": pearson(predictions, labels),
        "spearman": spearman(predictions, labels),
    }


def gaussian_nll(y_hat, s_hat, y):
    """Mean NLL of N(y_hat, s_hat) at y, for non-evidential models."""
    y_hat, y = _check_pair(y_hat, y)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if np.any(s_hat <= 0):
        raise ValueError("predictive variance must be positive")
    return float(np.mean(0.5 * np.log(2.0 * math.pi * s_hat)
                         + (y - y_hat) ** 2 / (2.0 * s_hat)))


def evidential_nll(gamma, nu, alpha, beta, y, log_scale_offset=0.0):
    """Mean Student-t form NLL at the per-sample posterior parameters.

    ``log_scale_offset`` shifts the density to a different label scale (the
    Jacobian term when predictions were made on standardized labels).
    """
    gamma, y = _check_pair(gamma, y)
    nu = np.asarray(nu, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    omega = 2.0 * beta * (nu + 1.0)
    vals = (0.5 * np.log(math.pi / nu)
            + (alpha + 0.5) * np.log((y - gamma) ** 2 * nu + omega)
            - alpha * np.log(omega)
            + special.lgamma(alpha) - special.lgamma(alpha + 0.5))
    return float(np.mean(vals) + log_scale_offset)


def sparsification_curves(uncertainties, abs_errors, steps=100):
    """Model and oracle sparsification curves over removal fractions.

    At fraction t the ceil(t*N) samples with the largest predicted
    uncertainty (model curve) or largest true error (oracle curve) are
    removed and the MAE of the remainder recorded; both curves are
    normalized by the full-sample MAE.
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    e = np.asarray(abs_errors, dtype=np.float64)
    if u.shape != e.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {e.shape}")
    n = u.size
    if n < 10:
        raise ValueError(f"sparsification needs >= 10 samples, got {n}")
    base = e.mean()
    if base == 0.0:
        # a perfect model sparsifies to flat zero curves
        ts = np.arange(steps) / steps
        return ts, np.zeros(steps), np.zeros(steps)
    by_u = e[np.argsort(u, kind="stable")]      # ascending uncertainty
    by_e = np.sort(e)                            # ascending error
    cum_u = np.concatenate([[0.0], np.cumsum(by_u)])
    cum_e = np.concatenate([[0.0], np.cumsum(by_e)])
    ts = np.arange(steps) / steps
    model = np.empty(steps)
    oracle = np.empty(steps)
    for i, t in enumerate(ts):
        # never drop the final sample (ceil(0.99 n) == n for n < 100)
        keep = max(n - math.ceil(t * n), 1)
        model[i] = cum_u[keep] / keep / base
        oracle[i] = cum_e[keep] / keep / base
    return ts, model, oracle


def ause(uncertainties, abs_errors, steps=100):
    """Area between the model and oracle sparsification curves (trapezoid)."""
    ts, model, oracle = sparsification_curves(uncertainties, abs_errors, steps)
    return float(np.trapezoid(model - oracle, ts))


@dataclass
class MetricReport:
    """Per-region metrics; regions without samples or models without
    uncertainty simply omit the corresponding entries."""

    regions: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def row(self, region):
        return self.regions.get(region, {})

    def to_rows(self, **tags):
        rows = []
        for region in REGION_ORDER:
            if region not in self.regions:
                continue
            row = dict(tags)
            row["region"] = region
            row["count"] = self.counts[region]
            row.update(self.regions[region])
            rows.append(row)
        return rows


def report(labels, predictions, region_names, uncertainties=None,
           posterior=None, nll_offset=0.0):
    """Build the full shot-region MetricReport.

    ``posterior`` is an optional (gamma, nu, alpha, beta) tuple of
    per-sample arrays; when present the NLL uses the evidential density,
    otherwise a Gaussian density when ``uncertainties`` is given, otherwise
    no uncertainty metrics at all.
    """
    labels = np.asarray(labels, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    region_names = np.asarray(region_names)
    out = MetricReport()
    masks = {"all": np.ones(labels.size, dtype=bool)}
    for region in (MANY, MEDIUM, FEW):
        masks[region] = region_names == region
    for region, mask in masks.items():
        if not mask.any():
            continue
        row = regression_metrics(predictions[mask], labels[mask])
        if posterior is not None:
            g, nu, al, be = (np.asarray(p)[mask] for p in posterior)
            row["nll"] = evidential_nll(g, nu, al, be, labels[mask],
                                        log_scale_offset=nll_offset)
        elif uncertainties is not None:
            row["nll"] = gaussian_nll(predictions[mask], np.asarray(uncertainties)[mask],
                                      labels[mask])
        if uncertainties is not None and mask.sum() >= 10:
            u = np.asarray(uncertainties)[mask]
            row["ause"] = ause(u, np.abs(predictions[mask] - labels[mask]))
            if np.all(u == u[0]):
                row["ause_degenerate"] = True
        out.regions[region] = row
        out.counts[region] = int(mask.sum())
    return out


@dataclass
class CalibrationWeights:
    w_nu: float
    w_alpha: float
    w_beta: float
    nll_before: float
    nll_after: float
    alpha_clamped: bool = False


def _scaled_nll(posterior, y, w_nu, w_alpha, w_beta, alpha_floor=1.5, offset=0.0):
    g, nu, al, be = posterior
    al_scaled = np.maximum(w_alpha * al, alpha_floor)
    clamped = bool(np.all(w_alpha * al < alpha_floor))
    nll = evidential_nll(g, w_nu * nu, al_scaled, w_beta * be, y, log_scale_offset=offset)
    return nll, clamped


def calibrate_scales(posterior, y, grid_lo=0.25, grid_hi=4.0, grid_size=17,
                     sweeps=3, nll_offset=0.0):
    """Coordinate-descent grid search for posterior scale weights.

    Scales nu, alpha (floored), and beta by scalar weights chosen on a
    log-spaced grid to minimize the validation NLL. The identity weights
    are on the grid, so calibration can never end up worse than it started.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("calibration requires a non-empty validation set")
    grid = np.exp(np.linspace(math.log(grid_lo), math.log(grid_hi), grid_size))
    # force the exact identity onto the grid
    grid[np.argmin(np.abs(grid - 1.0))] = 1.0
    weights = [1.0, 1.0, 1.0]
    before, _ = _scaled_nll(posterior, y, 1.0, 1.0, 1.0, offset=nll_offset)
    best = before
    clamp_flag = False
    # beta is the pure scale knob, so it sweeps first; nu and alpha then
    # only pick up what a scale correction cannot explain
    for _ in range(sweeps):
        for axis in (2, 0, 1):
            for cand in grid:
                trial = list(weights)
                trial[axis] = cand
                nll, clamped = _scaled_nll(posterior, y, *trial, offset=nll_offset)
                if nll < best:
                    best = nll
                    weights = trial
                    clamp_flag = clamped
    return CalibrationWeights(w_nu=weights[0], w_alpha=weights[1], w_beta=weights[2],
                              nll_before=before, nll_after=best,
                              alpha_clamped=clamp_flag)
