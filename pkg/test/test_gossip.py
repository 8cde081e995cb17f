import math
from unittest import TestCase

import numpy as np
from hypothesis import given, settings, strategies as st

from gossipqcd.exceptions import InvalidParameterError, TooLargeError
from gossipqcd.gossip import (
    GossipPeriod,
    NotEnumerableError,
    ReachSet,
    SubsetDistribution,
    incomplete_probability,
    inclusion_probabilities,
    inclusion_probabilities_exact,
    mask_members,
    propagate,
    propagate_all,
    sample_period,
    sample_reach_masks,
    subset_distribution_exact,
    subset_distribution_mc,
    subset_distributions_exact,
)
from gossipqcd.rounds import FixedRounds, PoissonRounds
from gossipqcd.topology import Matching, SequentialMatchingSampler, complete_graph

from helpers import path_graph, star_graph, uniform_a_bar, uniform_law
from test_topology import connected_graphs


class PropagationTests(TestCase):
    def test_relay_along_a_path(self):
        period = GossipPeriod(2, (Matching((1, 0, 2)), Matching((0, 2, 1))))
        np.testing.assert_array_equal(propagate_all(period), [0b011, 0b111, 0b101])
        self.assertEqual(propagate(period, 2).members(), (0, 2))

    def test_empty_period(self):
        reach = propagate(GossipPeriod(0, ()), 2, node_count=4)
        self.assertEqual(reach.bits, 0b100)
        self.assertEqual(len(reach), 1)
        with self.assertRaises(InvalidParameterError):
            propagate_all(GossipPeriod(0, ()))

    def test_round_count_must_match(self):
        with self.assertRaises(InvalidParameterError):
            GossipPeriod(2, (Matching((1, 0)),))

    def test_reach_set(self):
        reach = ReachSet(0b1011, owner=1)
        self.assertIn(3, reach)
        self.assertNotIn(2, reach)
        self.assertEqual(str(reach), "{0, 1, 3}")
        with self.assertRaises(InvalidParameterError):
            ReachSet(0b1010, owner=0)
        self.assertEqual(mask_members(0), ())

    @settings(max_examples=40, deadline=None)
    @given(connected_graphs(), st.integers(min_value=0, max_value=12), st.integers(min_value=0))
    def test_reach_sets_grow_with_rounds(self, graph, rounds, seed):
        rng = np.random.default_rng(seed)
        law = uniform_law(graph)
        matchings = tuple(law.sample_many(rounds, rng))
        n = graph.node_count
        previous = np.left_shift(1, np.arange(n))
        for m in range(rounds + 1):
            masks = propagate_all(GossipPeriod(m, matchings[:m]), n)
            self.assertTrue(np.all(masks & previous == previous))
            previous = masks

    def test_sampled_periods(self):
        rng = np.random.default_rng(2)
        period = sample_period(uniform_law(complete_graph(4)), FixedRounds(3), rng)
        self.assertEqual(period.round_count, 3)
        self.assertEqual(len(period.matchings), 3)


class ReachMaskSamplingTests(TestCase):
    def test_every_mask_contains_its_owner(self):
        n = 5
        owners = np.left_shift(1, np.arange(n))
        for law in (uniform_law(complete_graph(n)), SequentialMatchingSampler(path_graph(n))):
            masks = sample_reach_masks(law, PoissonRounds(3), 200, np.random.default_rng(4))
            self.assertEqual(masks.shape, (200, n))
            self.assertTrue(np.all(masks & owners == owners))

    def test_zero_rounds(self):
        masks = sample_reach_masks(uniform_law(complete_graph(3)), PoissonRounds(0), 10, np.random.default_rng(0))
        np.testing.assert_array_equal(masks, np.tile([1, 2, 4], (10, 1)))

    def test_vectorized_matches_period_by_period(self):
        law = uniform_law(complete_graph(4))
        rng = np.random.default_rng(8)
        vectorized = sample_reach_masks(law, PoissonRounds(2), 20_000, rng)[:, 0]
        looped = np.array(
            [propagate_all(sample_period(law, PoissonRounds(2), rng), 4)[0] for _ in range(20_000)]
        )
        self.assertAlmostEqual(np.mean(vectorized == 0b1111), np.mean(looped == 0b1111), delta=0.025)


class SubsetDistributionTests(TestCase):
    def test_validation(self):
        with self.assertRaises(InvalidParameterError):
            SubsetDistribution(owner=0, mean_rounds=1.0, probs=np.full(3, 1 / 3))
        with self.assertRaises(InvalidParameterError):
            SubsetDistribution(owner=0, mean_rounds=1.0, probs=np.array([0.0, 0.5, 0.0, 0.4]))
        with self.assertRaises(InvalidParameterError):
            SubsetDistribution(owner=0, mean_rounds=1.0, probs=np.array([0.0, 0.5, 0.5, 0.0]))

    def test_two_nodes_closed_form(self):
        law = uniform_law(complete_graph(2))
        for gamma in (0.5, 2.0, 9.0):
            sd = subset_distribution_exact(law, gamma, 0)
            self.assertAlmostEqual(sd.probs[0b01], math.exp(-gamma / 2), places=10)
            self.assertAlmostEqual(sd.probs[0b11], 1 - math.exp(-gamma / 2), places=10)
            self.assertAlmostEqual(incomplete_probability(sd), math.exp(-gamma / 2), places=10)
            self.assertLess(sd.truncated_mass, 1e-10)

    def test_no_rounds(self):
        sd = subset_distribution_exact(uniform_law(complete_graph(4)), 0.0, 2)
        self.assertEqual(dict(sd.support()), {0b0100: 1.0})

    def test_fixed_rounds(self):
        law = uniform_law(complete_graph(2))
        sd = subset_distribution_exact(law, 3, 1, rounds=FixedRounds)
        self.assertAlmostEqual(sd.probs[0b10], 0.125, places=14)

    def test_grid_matches_single_values(self):
        law = uniform_law(path_graph(4))
        gammas = [0.5, 2.0, 7.0]
        grid = subset_distributions_exact(law, gammas, 1)
        for gamma, sd in zip(gammas, grid):
            np.testing.assert_allclose(sd.probs, subset_distribution_exact(law, gamma, 1).probs, atol=1e-14)

    def test_normalized_with_owner(self):
        for graph in (complete_graph(5), path_graph(5)):
            law = uniform_law(graph)
            for owner in range(5):
                sd = subset_distribution_exact(law, 6.0, owner)
                self.assertAlmostEqual(math.fsum(sd.probs), 1.0, places=10)
                self.assertTrue(all((mask >> owner) & 1 for mask, _ in sd.support()))

    def test_inclusion_matches_hitting_tails(self):
        for graph in (complete_graph(4), path_graph(5)):
            law = uniform_law(graph)
            a_bar = uniform_a_bar(graph)
            for owner in range(graph.node_count):
                for gamma in (1.0, 6.0):
                    sd = subset_distribution_exact(law, gamma, owner)
                    np.testing.assert_allclose(
                        inclusion_probabilities(sd),
                        inclusion_probabilities_exact(a_bar, owner, PoissonRounds(gamma)),
                        atol=1e-9,
                    )

    def test_incomplete_probability_decreases(self):
        law = uniform_law(path_graph(4))
        values = [incomplete_probability(sd) for sd in subset_distributions_exact(law, range(1, 13), 0)]
        self.assertTrue(all(b <= a + 1e-12 for a, b in zip(values, values[1:])))

    def test_monte_carlo_agrees(self):
        law = uniform_law(complete_graph(4))
        exact = subset_distribution_exact(law, 3.0, 0)
        trials = 40_000
        mc = subset_distribution_mc(law, 3.0, 0, trials, np.random.default_rng(13))
        self.assertEqual(mc.method, "mc")
        self.assertEqual(mc.trials, trials)
        se = np.sqrt(exact.probs * (1 - exact.probs) / trials)
        self.assertTrue(np.all(np.abs(mc.probs - exact.probs) <= 5 * se + 1e-4))

    def test_monte_carlo_agrees_off_the_complete_graph(self):
        trials = 100_000
        rng = np.random.default_rng(29)
        for name, graph, owner, gamma in (
            ("P4", path_graph(4), 0, 3.0),
            ("P4", path_graph(4), 1, 6.0),
            ("S5", star_graph(5), 0, 3.0),
            ("S5", star_graph(5), 2, 6.0),
        ):
            law = uniform_law(graph)
            exact = subset_distribution_exact(law, gamma, owner)
            mc = subset_distribution_mc(law, gamma, owner, trials, rng)
            se = np.maximum(np.sqrt(exact.probs * (1 - exact.probs) / trials), 1 / trials)
            with self.subTest(graph=name, owner=owner, gamma=gamma):
                worst = int(np.argmax(np.abs(mc.probs - exact.probs) / se))
                self.assertLessEqual(
                    abs(mc.probs[worst] - exact.probs[worst]), 4 * se[worst], f"subset {worst:b}"
                )

    def test_exact_needs_an_enumerated_law(self):
        with self.assertRaises(NotEnumerableError):
            subset_distribution_exact(SequentialMatchingSampler(path_graph(3)), 1.0, 0)

    def test_exact_size_limit(self):
        with self.assertRaises(TooLargeError):
            subset_distribution_exact(uniform_law(path_graph(8)), 1.0, 0)

    def test_invalid_owner(self):
        with self.assertRaises(InvalidParameterError):
            subset_distribution_exact(uniform_law(path_graph(3)), 1.0, 3)
        with self.assertRaises(InvalidParameterError):
            subset_distribution_mc(uniform_law(path_graph(3)), 1.0, -1, 10, np.random.default_rng(0))
