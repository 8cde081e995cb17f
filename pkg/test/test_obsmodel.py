import math
from unittest import TestCase

import numpy as np
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import norm

from gossipqcd.gossip import subset_distribution_exact
from gossipqcd.markov import DegenerateBoundError, bound_params
from gossipqcd.obsmodel import (
    Density,
    Gaussian,
    InvalidDensityError,
    KLSummary,
    NondistinguishablePairError,
    ObservationModel,
    OutOfSupportError,
    SensorDensityPair,
    Tabulated,
    distributed_kl,
    kl_bounds_thm4,
    kl_envelope,
    kl_number,
    kl_number_quadrature,
    kl_number_with_error,
    log_likelihood_ratio,
    subset_kl_sums,
)
from gossipqcd.markov import window_envelope
from gossipqcd.exceptions import InvalidParameterError
from gossipqcd.rounds import PoissonRounds
from gossipqcd.topology import averaged_matrix, complete_graph, explicit_distribution

from helpers import REFERENCE_KLS, path_graph, shifted_gaussians, uniform_a_bar, uniform_law

GRID = np.linspace(-10.0, 10.0, 2001)


def tabulated_normal(mean: float) -> Tabulated:
    return Tabulated(GRID, norm.logpdf(GRID, loc=mean))


class DensityTests(TestCase):
    def test_gaussian_validation(self):
        with self.assertRaises(InvalidDensityError):
            Gaussian(0.0, 0.0)
        with self.assertRaises(InvalidDensityError):
            Gaussian(math.nan, 1.0)

    def test_from_dict(self):
        density = Density.from_dict({"kind": "gaussian", "mean": 1.5, "variance": 2.0})
        self.assertEqual(density, Gaussian(1.5, 2.0))
        self.assertEqual(density.to_dict()["kind"], "gaussian")
        with self.assertRaises(InvalidDensityError):
            Density.from_dict({"kind": "laplace", "scale": 1.0})
        with self.assertRaises(InvalidDensityError):
            Density.from_dict({"kind": "gaussian", "mean": 0.0})

    def test_tabulated_validation(self):
        with self.assertRaises(InvalidDensityError):
            Tabulated(GRID[:2], norm.logpdf(GRID[:2]))
        with self.assertRaises(InvalidDensityError):
            Tabulated(GRID, norm.logpdf(GRID) + 0.1)
        uneven = np.concatenate([GRID[:1000], GRID[1001:]])
        with self.assertRaises(InvalidDensityError):
            Tabulated(uneven, norm.logpdf(uneven))

    def test_tabulated_support(self):
        density = tabulated_normal(0.0)
        self.assertAlmostEqual(float(density.log_pdf(0.0)), norm.logpdf(0.0), places=12)
        with self.assertRaises(OutOfSupportError):
            density.log_pdf(10.5)

    def test_tabulated_sampling(self):
        samples = tabulated_normal(0.5).sample(np.random.default_rng(3), 20_000)
        self.assertAlmostEqual(float(np.mean(samples)), 0.5, delta=0.03)
        self.assertAlmostEqual(float(np.var(samples)), 1.0, delta=0.05)


class KLTests(TestCase):
    def test_shifted_gaussians(self):
        np.testing.assert_allclose(shifted_gaussians(5).kls(), REFERENCE_KLS, rtol=1e-12)
        self.assertAlmostEqual(shifted_gaussians(5).summary().centralized, 0.275, places=12)

    def test_variance_change(self):
        pair = SensorDensityPair(Gaussian(0.0, 1.0), Gaussian(0.0, 2.0))
        self.assertAlmostEqual(kl_number(pair), 0.5 * (1.0 - math.log(2.0)), places=14)

    @settings(deadline=None)
    @given(
        st.floats(min_value=-3.0, max_value=3.0),
        st.floats(min_value=0.2, max_value=5.0),
        st.floats(min_value=-3.0, max_value=3.0),
        st.floats(min_value=0.2, max_value=5.0),
    )
    def test_quadrature_matches_closed_form(self, pre_mean, pre_variance, post_mean, post_variance):
        assume(abs(pre_mean - post_mean) > 1e-3 or abs(pre_variance - post_variance) > 1e-3)
        pair = SensorDensityPair(Gaussian(pre_mean, pre_variance), Gaussian(post_mean, post_variance))
        expected = kl_number(pair)
        self.assertLessEqual(abs(kl_number_quadrature(pair) - expected), 1e-8 * max(1.0, expected))

    def test_tabulated(self):
        pair = SensorDensityPair(tabulated_normal(0.0), tabulated_normal(0.5))
        value, error = kl_number_with_error(pair)
        self.assertAlmostEqual(value, 0.125, places=8)
        self.assertLess(error, 1e-6 * value)
        self.assertAlmostEqual(kl_number_quadrature(pair), value, delta=1e-4)

    def test_indistinguishable(self):
        with self.assertRaises(NondistinguishablePairError) as ctx:
            SensorDensityPair(Gaussian(0.0, 1.0), Gaussian(0.0, 1.0))
        self.assertEqual(ctx.exception.code, "E_NONDISTINGUISHABLE")

    def test_mixed_kinds(self):
        with self.assertRaises(InvalidDensityError):
            SensorDensityPair(Gaussian(0.0, 1.0), tabulated_normal(0.5))

    def test_log_likelihood_ratio(self):
        pair = SensorDensityPair(Gaussian(0.0, 1.0), Gaussian(0.5, 1.0))
        self.assertAlmostEqual(float(log_likelihood_ratio(pair, 1.0)), 0.375, places=14)
        np.testing.assert_allclose(pair.llr(np.array([0.0, 2.0])), [-0.125, 0.875])


class ObservationModelTests(TestCase):
    def test_sample_block(self):
        model = shifted_gaussians(3, step=1.0)
        post = np.arange(4000) >= 2000
        x = model.sample_block(np.random.default_rng(6), post)
        self.assertEqual(x.shape, (4000, 3))
        np.testing.assert_allclose(x[:2000].mean(axis=0), [0.0, 0.0, 0.0], atol=0.08)
        np.testing.assert_allclose(x[2000:].mean(axis=0), [1.0, 2.0, 3.0], atol=0.08)
        self.assertEqual(model.llr_matrix(x).shape, (4000, 3))

    def test_needs_a_sensor(self):
        with self.assertRaises(InvalidParameterError):
            ObservationModel(())

    def test_summary(self):
        summary = shifted_gaussians(5).summary()
        np.testing.assert_allclose(summary.per_sensor, REFERENCE_KLS, rtol=1e-12)
        self.assertAlmostEqual(summary.centralized, 0.275, places=12)

    def test_llr_matrix_shape(self):
        with self.assertRaises(InvalidParameterError):
            shifted_gaussians(3).llr_matrix(np.zeros((4, 2)))

    def test_draws_do_not_depend_on_the_change(self):
        model = shifted_gaussians(2)
        a = model.sample_block(np.random.default_rng(1), np.zeros(5, dtype=bool))
        b = model.sample_block(np.random.default_rng(1), np.ones(5, dtype=bool))
        np.testing.assert_allclose(b - a, np.tile([0.1, 0.2], (5, 1)), atol=1e-12)


class SummaryTests(TestCase):
    def test_centralized_is_the_sum(self):
        with self.assertRaises(InvalidParameterError):
            KLSummary(per_sensor=np.array([0.1, 0.2]), centralized=0.4)

    def test_sandwich(self):
        summary = KLSummary.from_kls([0.1, 0.2])
        self.assertEqual(summary.with_distributed(0, 3.0, 0.25).distributed[(0, 3.0)], 0.25)
        with self.assertRaises(InvalidParameterError):
            summary.with_distributed(1, 3.0, 0.15)


class DistributedKLTests(TestCase):
    def test_subset_sums(self):
        np.testing.assert_allclose(subset_kl_sums(np.array([1.0, 2.0, 4.0])), np.arange(8.0))

    def test_two_nodes(self):
        kls = np.array([0.1, 0.3])
        for gamma in (0.0, 1.0, 8.0):
            sd = subset_distribution_exact(uniform_law(complete_graph(2)), gamma, 0)
            self.assertAlmostEqual(
                distributed_kl(sd, kls), 0.1 + 0.3 * (1 - math.exp(-gamma / 2)), places=10
            )

    def test_kl_count_must_match(self):
        sd = subset_distribution_exact(uniform_law(complete_graph(2)), 1.0, 0)
        with self.assertRaises(InvalidParameterError):
            distributed_kl(sd, np.array([0.1, 0.2, 0.3]))

    def test_asymptotic_bounds(self):
        bp = bound_params(uniform_a_bar(complete_graph(5)), 4, 15)
        lower, upper = kl_bounds_thm4(REFERENCE_KLS, 4, bp, 30.0)
        decay = math.exp(30.0 * math.log(22 / 26))
        self.assertAlmostEqual(lower, 0.275 - 0.08 * decay, places=12)
        self.assertAlmostEqual(upper, 0.275 - 0.005 * decay, places=12)

    def test_asymptotic_bounds_need_a_positive_beta(self):
        a_bar = averaged_matrix(explicit_distribution(complete_graph(2), [((1, 0), 1.0)]))
        with self.assertRaises(DegenerateBoundError):
            kl_bounds_thm4(np.array([0.1, 0.2]), 0, bound_params(a_bar, 0, 2), 5.0)

    def test_envelope_brackets_the_exact_value(self):
        graph = path_graph(4)
        kls = np.array([0.02, 0.05, 0.01, 0.1])
        bp = bound_params(uniform_a_bar(graph), 0, 6)
        for gamma in (2.0, 10.0, 30.0):
            sd = subset_distribution_exact(uniform_law(graph), gamma, 0)
            lower, upper = kl_envelope(kls, 0, window_envelope(bp, PoissonRounds(gamma)))
            value = distributed_kl(sd, kls)
            self.assertLessEqual(lower, value + 1e-12)
            self.assertLessEqual(value, upper + 1e-12)
