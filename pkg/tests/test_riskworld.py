"""Risk estimator theory: exact enumeration and Monte Carlo checks."""

import itertools
import math

import numpy as np
import pytest

from vireg import riskworld as rw
from vireg.labelspace import Kernel


def expectation_oracle(world, estimator):
    """Brute-force expectation, written independently of the library path."""
    p = world.sample_propensities()
    n = p.size
    total, mass = 0.0, 0.0
    for bits in itertools.product((0, 1), repeat=n):
        mask = np.array(bits, dtype=bool)
        prob = np.prod([pi if b else 1 - pi for pi, b in zip(p, bits)])
        val = estimator(world, mask)
        if val is None:
            continue
        total += prob * val
        mass += prob
    return total / mass


class TestTrueRisk:
    def test_constant_losses(self):
        world = rw.make_world([[0.3, 0.3], [0.3]], [0.5, 0.5], delta_max=1.0)
        assert rw.true_risk(world) == pytest.approx(0.3)

    def test_canonical_world(self):
        world = rw.canonical_two_bin_world()
        assert rw.true_risk(world) == pytest.approx(0.45, abs=1e-15)

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            world = rw.random_world(rng)
            assert 0.0 <= rw.true_risk(world) <= world.delta_max


class TestEstimatorsOnPatterns:
    def test_all_observed_naive_is_pooled_mean(self):
        world = rw.canonical_two_bin_world()
        mask = np.ones(3, dtype=bool)
        assert rw.naive_estimator(world, mask) == pytest.approx((0.2 + 0.4 + 0.6) / 3)

    def test_single_observation(self):
        world = rw.canonical_two_bin_world()
        assert rw.naive_estimator(world, [False, False, True]) == pytest.approx(0.6)

    def test_empty_observation_signals_undefined(self):
        world = rw.canonical_two_bin_world()
        assert rw.naive_estimator(world, np.zeros(3, dtype=bool)) is None

    def test_ips_with_full_observation_unit_propensity(self):
        world = rw.make_world([[0.2, 0.4], [0.6]], [1.0, 1.0], delta_max=0.6,
                              smoothed=[1.0, 1.0])
        assert rw.ips_estimator(world, np.ones(3, dtype=bool)) == pytest.approx(0.45)

    def test_ips_empty_is_zero(self):
        world = rw.canonical_two_bin_world()
        assert rw.ips_estimator(world, np.zeros(3, dtype=bool)) == 0.0

    def test_vir_equals_ips_when_smoothed_is_raw(self):
        world = rw.make_world([[0.1, 0.5], [0.9]], [0.7, 0.3], delta_max=1.0,
                              smoothed=[0.7, 0.3])
        for bits in itertools.product((0, 1), repeat=3):
            mask = np.array(bits, dtype=bool)
            assert rw.vir_estimator(world, mask) == rw.ips_estimator(world, mask)


class TestExhaustiveMoments:
    def test_naive_is_biased(self):
        world = rw.canonical_two_bin_world()
        mean, _ = rw.exhaustive_moments(world, rw.naive_estimator)
        assert mean == pytest.approx(expectation_oracle(world, rw.naive_estimator), abs=1e-12)
        assert abs(mean - 0.45) > 1e-3

    def test_ips_unbiased_canonical(self):
        world = rw.canonical_two_bin_world()
        mean, _ = rw.exhaustive_moments(world, rw.ips_estimator)
        assert mean == pytest.approx(0.45, abs=1e-12)

    def test_ips_unbiased_random_worlds(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            world = rw.random_world(rng, num_bins=int(rng.integers(2, 5)), max_bin_size=3)
            mean, _ = rw.exhaustive_moments(world, rw.ips_estimator)
            assert mean == pytest.approx(rw.true_risk(world), abs=1e-12)

    def test_vir_canonical_bias(self):
        world = rw.canonical_two_bin_world()
        mean, _ = rw.exhaustive_moments(world, rw.vir_estimator)
        # E[VIR] = (0.3 * 0.8/0.6 + 0.6 * 0.2/0.4) / 2 = 0.35
        assert mean == pytest.approx(0.35, abs=1e-12)
        assert abs(mean - 0.45) == pytest.approx(0.10, abs=1e-12)
        assert mean == pytest.approx(rw.expected_vir(world), abs=1e-12)

    def test_cap_enforced(self):
        world = rw.make_world([np.full(13, 0.1)], [0.5], delta_max=1.0)
        with pytest.raises(ValueError, match="capped"):
            rw.exhaustive_moments(world, rw.ips_estimator)


class TestTheoremBound:
    def test_zero_bias_when_smoothed_equals_raw(self):
        world = rw.make_world([[0.2], [0.4]], [0.5, 0.5], smoothed=[0.5, 0.5],
                              delta_max=1.0)
        assert rw.theorem_bound(world).bias_term == 0.0

    def test_canonical_bias_bound(self):
        world = rw.canonical_two_bin_world()
        report = rw.theorem_bound(world)
        # 0.3 * (|1 - 4/3| + |1 - 1/2|) = 0.25
        assert report.bias_term == pytest.approx(0.25, abs=1e-12)
        assert report.bias_term >= 0.10  # dominates the exhaustive bias

    def test_bias_bound_dominates_everywhere(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            world = rw.random_world(rng, num_bins=int(rng.integers(2, 4)), max_bin_size=3)
            mean, _ = rw.exhaustive_moments(world, rw.vir_estimator)
            bound = rw.theorem_bound(world).bias_term
            assert abs(mean - rw.true_risk(world)) <= bound + 1e-12

    def test_variance_term_monotone_in_smoothed_floor(self):
        base = rw.make_world([[0.5], [0.5]], [0.5, 0.5], smoothed=[0.1, 0.5],
                             delta_max=1.0)
        lifted = rw.make_world([[0.5], [0.5]], [0.5, 0.5], smoothed=[0.3, 0.5],
                               delta_max=1.0)
        assert rw.theorem_bound(lifted).variance_term < rw.theorem_bound(base).variance_term

    def test_total_requires_observation(self):
        world = rw.canonical_two_bin_world()
        assert rw.theorem_bound(world).total is None
        report = rw.theorem_bound(world, observed=np.ones(3, dtype=bool))
        est = rw.vir_estimator(world, np.ones(3, dtype=bool))
        assert report.total == pytest.approx(est + 0.25 + report.variance_term)

    def test_parameter_validation(self):
        world = rw.canonical_two_bin_world()
        with pytest.raises(ValueError):
            rw.theorem_bound(world, eta=0.0)
        with pytest.raises(ValueError):
            rw.theorem_bound(world, hypothesis_count=0)


class TestVarianceReduction:
    def test_smoothing_lowers_variance_in_imbalanced_regime(self):
        rng = np.random.default_rng(3)
        wins = 0
        total = 100
        for _ in range(total):
            # one rare tail bin among moderately observed neighbors
            world = rw.random_world(rng, num_bins=5, max_bin_size=2,
                                    propensity_low=0.25,
                                    force_rare=rng.uniform(0.01, 0.05),
                                    kernel=Kernel())
            _, var_vir = rw.exhaustive_moments(world, rw.vir_estimator)
            _, var_ips = rw.exhaustive_moments(world, rw.ips_estimator)
            if var_vir < var_ips:
                wins += 1
        assert wins >= 95


class TestMonteCarlo:
    def test_unit_propensities_zero_variance(self):
        world = rw.make_world([[0.2, 0.4], [0.6]], [1.0, 1.0], smoothed=[1.0, 1.0],
                              delta_max=0.6)
        report = rw.mc_experiment(world, 500, seed=0)
        assert report.stats["ips"].var < 1e-30
        assert report.stats["vir"].var < 1e-30
        assert report.stats["naive"].var < 1e-30

    def test_ips_mean_converges(self):
        world = rw.canonical_two_bin_world()
        report = rw.mc_experiment(world, 100_000, seed=1)
        stats = report.stats["ips"]
        assert abs(stats.mean - 0.45) < 3 * stats.std_err

    def test_vir_mean_converges_to_closed_form(self):
        world = rw.canonical_two_bin_world()
        report = rw.mc_experiment(world, 100_000, seed=2)
        stats = report.stats["vir"]
        assert abs(stats.mean - 0.35) < 3 * stats.std_err

    def test_tail_bound_respected(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            world = rw.random_world(rng, num_bins=3, max_bin_size=3,
                                    propensity_low=0.15)
            report = rw.mc_experiment(world, 20_000, seed=int(rng.integers(1 << 30)),
                                      eta=0.05)
            slack = 3 * math.sqrt(0.05 * 0.95 / 20_000)
            assert report.violation_fraction <= 0.05 + slack

    def test_draw_validation(self):
        with pytest.raises(ValueError):
            rw.mc_experiment(rw.canonical_two_bin_world(), 0, seed=0)


class TestSmoothPropensities:
    def test_raises_rare_bins(self):
        props = np.array([0.02, 0.5, 0.6, 0.5, 0.4])
        smoothed = rw.smooth_propensities(props, Kernel())
        assert smoothed[0] > props[0]
        assert np.all(smoothed <= 1.0) and np.all(smoothed > 0.0)

    def test_constant_propensities_fixed_point(self):
        props = np.full(6, 0.37)
        np.testing.assert_allclose(rw.smooth_propensities(props, Kernel()), 0.37,
                                   atol=1e-12)

    def test_world_validation(self):
        with pytest.raises(ValueError):
            rw.make_world([[0.5], []], [0.5, 0.5], delta_max=1.0)
        with pytest.raises(ValueError):
            rw.make_world([[0.5], [2.0]], [0.5, 0.5], delta_max=1.0)
        with pytest.raises(ValueError):
            rw.make_world([[0.5], [0.5]], [0.0, 0.5], delta_max=1.0)
