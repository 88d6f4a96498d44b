"""Metric arithmetic, sparsification, and calibration checks."""

import math

import numpy as np
import pytest

from vireg import metrics as mx

NLL_CANONICAL = 0.9808292530117262


def ause_oracle(uncertainties, abs_errors, steps=100):
    """Exhaustive re-computation of both sparsification curves."""
    u = np.asarray(uncertainties, dtype=np.float64)
    e = np.asarray(abs_errors, dtype=np.float64)
    n = u.size
    base = e.mean()
    ts = np.arange(steps) / steps
    model, oracle = [], []
    for t in ts:
        keep = max(n - math.ceil(t * n), 1)
        keep_model = np.argsort(u, kind="stable")[:keep]
        keep_oracle = np.argsort(e, kind="stable")[:keep]
        model.append(e[keep_model].mean() / base)
        oracle.append(e[keep_oracle].mean() / base)
    return float(np.trapezoid(np.array(model) - np.array(oracle), ts))


class TestRegressionMetrics:
    def test_arithmetic(self):
        out = mx.regression_metrics([1.0, 4.0], [0.0, 0.0])
        assert out["mae"] == pytest.approx(2.5)
        assert out["mse"] == pytest.approx(8.5)
        assert out["gm"] == pytest.approx(2.0, rel=1e-9)

    def test_perfect_predictions(self):
        labels = np.array([1.0, 2.0, 3.0])
        out = mx.regression_metrics(labels, labels)
        assert out["mae"] == 0.0 and out["mse"] == 0.0
        assert out["gm"] == pytest.approx(mx.EPS_GM, rel=1e-9)
        assert out["pearson"] == pytest.approx(1.0)

    def test_anti_monotone_spearman(self):
        labels = np.array([1.0, 2.0, 3.0, 4.0])
        out = mx.regression_metrics(labels[::-1], labels)
        assert out["spearman"] == pytest.approx(-1.0)

    def test_spearman_tie_handling(self):
        # against the closed form with mean ranks
        a = np.array([1.0, 1.0, 2.0, 3.0])
        b = np.array([4.0, 3.0, 2.0, 1.0])
        from scipy.stats import spearmanr
        assert mx.spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            mx.regression_metrics([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            mx.regression_metrics([], [])

    def test_metric_inequalities_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pred = rng.normal(size=50)
            labels = rng.normal(size=50)
            out = mx.regression_metrics(pred, labels)
            assert out["mae"] <= math.sqrt(out["mse"]) + 1e-12
            assert out["gm"] <= out["mae"] + 1e-12


class TestPredictiveNLL:
    def test_gaussian_closed_form(self):
        y = np.array([1.0])
        nll = mx.gaussian_nll(y, np.array([1.0 / (2 * math.pi)]), y)
        assert nll == pytest.approx(0.0, abs=1e-12)

    def test_evidential_matches_canonical(self):
        one = np.array([1.0])
        nll = mx.evidential_nll(np.array([0.0]), one, np.array([2.0]), one, np.array([0.0]))
        assert nll == pytest.approx(NLL_CANONICAL, abs=1e-12)

    def test_gaussian_nll_minimized_at_true_variance(self):
        resid_sq = 2.0
        y_hat, y = np.array([0.0]), np.array([math.sqrt(resid_sq)])
        scan = [mx.gaussian_nll(y_hat, np.array([s]), y)
                for s in np.linspace(0.5, 6.0, 100)]
        best_s = np.linspace(0.5, 6.0, 100)[int(np.argmin(scan))]
        assert best_s == pytest.approx(resid_sq, abs=0.1)

    def test_positive_variance_required(self):
        with pytest.raises(ValueError):
            mx.gaussian_nll(np.array([0.0]), np.array([0.0]), np.array([0.0]))


class TestAUSE:
    def test_perfect_ordering_is_zero(self):
        rng = np.random.default_rng(1)
        e = rng.uniform(0, 5, size=200)
        assert mx.ause(e.copy(), e) == pytest.approx(0.0, abs=1e-12)

    def test_reversed_ordering_matches_enumeration(self):
        e = np.array([0.0, 1.0, 2.0, 3.0] * 5)
        u = -e
        assert mx.ause(u, e) == pytest.approx(ause_oracle(u, e), abs=1e-12)

    def test_random_matches_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            e = rng.uniform(0, 3, size=57)
            u = rng.uniform(0, 1, size=57)
            assert mx.ause(u, e) == pytest.approx(ause_oracle(u, e), abs=1e-12)

    def test_random_uncertainty_strictly_positive(self):
        rng = np.random.default_rng(3)
        e = rng.uniform(0.1, 5, size=10_000)
        u = rng.uniform(0, 1, size=10_000)
        assert mx.ause(u, e) > 0.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        e = rng.uniform(0, 2, size=300)
        u = rng.uniform(0.1, 3, size=300)
        base = mx.ause(u, e)
        assert mx.ause(np.exp(u), e) == pytest.approx(base, abs=1e-12)
        assert mx.ause(u ** 3, e) == pytest.approx(base, abs=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            mx.ause(np.ones(5), np.ones(5))

    def test_all_equal_uncertainties_well_defined(self):
        rng = np.random.default_rng(5)
        e = rng.uniform(0, 1, size=50)
        val = mx.ause(np.ones(50), e)
        assert np.isfinite(val) and val >= 0


class TestReport:
    def build(self):
        rng = np.random.default_rng(6)
        n = 400
        labels = rng.uniform(0, 10, size=n)
        preds = labels + rng.normal(scale=0.5, size=n)
        regions = rng.choice(["many", "medium", "few"], size=n, p=[0.6, 0.3, 0.1])
        unc = rng.uniform(0.1, 1.0, size=n)
        return labels, preds, regions, unc

    def test_regional_recombination(self):
        labels, preds, regions, unc = self.build()
        rep = mx.report(labels, preds, regions, uncertainties=unc)
        total = sum(rep.counts[r] for r in ("many", "medium", "few"))
        assert total == rep.counts["all"]
        weighted = sum(rep.counts[r] * rep.regions[r]["mae"]
                       for r in ("many", "medium", "few")) / rep.counts["all"]
        assert weighted == pytest.approx(rep.regions["all"]["mae"], abs=1e-12)

    def test_no_uncertainty_omits_entries(self):
        labels, preds, regions, _ = self.build()
        rep = mx.report(labels, preds, regions)
        assert "nll" not in rep.regions["all"]
        assert "ause" not in rep.regions["all"]

    def test_missing_region_absent(self):
        labels = np.ones(20)
        preds = np.ones(20) * 1.1
        rep = mx.report(labels, preds, np.array(["many"] * 20))
        assert "few" not in rep.regions

    def test_rows_schema(self):
        labels, preds, regions, unc = self.build()
        rows = mx.report(labels, preds, regions, uncertainties=unc).to_rows(variant="x", seed=1)
        assert {r["region"] for r in rows} == {"all", "many", "medium", "few"}
        assert all(r["variant"] == "x" and "mae" in r for r in rows)


class TestCalibration:
    def synth_posterior(self, rng, n=400, beta_scale=1.0):
        # draw y from the posterior's own predictive Student-t so the
        # uncalibrated parameters are correct by construction
        gamma = rng.normal(size=n)
        nu = rng.uniform(1.0, 3.0, size=n)
        alpha = rng.uniform(2.0, 4.0, size=n)
        beta = rng.uniform(0.5, 2.0, size=n)
        dof = 2 * alpha
        scale = np.sqrt(beta * (1 + nu) / (nu * alpha))
        y = gamma + scale * rng.standard_t(dof, size=n)
        return (gamma, nu, alpha, beta * beta_scale), y

    def test_already_calibrated_identity(self):
        rng = np.random.default_rng(7)
        posterior, y = self.synth_posterior(rng, n=4000)
        cal = mx.calibrate_scales(posterior, y)
        assert cal.nll_after <= cal.nll_before
        assert 0.7 <= cal.w_beta <= 1.5
        assert 0.5 <= cal.w_nu <= 2.0

    def test_recovers_inflated_beta(self):
        rng = np.random.default_rng(8)
        posterior, y = self.synth_posterior(rng, n=4000, beta_scale=2.0)
        cal = mx.calibrate_scales(posterior, y)
        assert 0.4 <= cal.w_beta <= 0.6

    def test_never_worse_than_identity(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            posterior, y = self.synth_posterior(rng, n=100,
                                                beta_scale=rng.uniform(0.3, 3.0))
            cal = mx.calibrate_scales(posterior, y)
            assert cal.nll_after <= cal.nll_before + 1e-12

    def test_empty_validation_rejected(self):
        with pytest.raises(ValueError):
            mx.calibrate_scales((np.array([]),) * 4, np.array([]))
