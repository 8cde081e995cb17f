import math
from unittest import TestCase

import numpy as np
from hypothesis import given, settings, strategies as st

from gossipqcd.exceptions import InvalidParameterError
from gossipqcd.markov import (
    DegenerateBoundError,
    NotIrreducibleError,
    bound_params,
    bounds_vs_window,
    hitting_tail,
    mixed_hitting_tail,
    sample_hitting_tail,
    tail_powers,
    taboo_spectral_radius,
    window_envelope,
)
from gossipqcd.rounds import FixedRounds, PoissonRounds
from gossipqcd.topology import (
    Matching,
    averaged_matrix,
    complete_graph,
    explicit_distribution,
    uniform_distribution,
)

from helpers import path_graph, star_graph, uniform_a_bar
from test_topology import connected_graphs


class HittingTailTests(TestCase):
    def test_path_graph(self):
        a_bar = uniform_a_bar(path_graph(3))
        table = hitting_tail(a_bar, 0, 2)
        self.assertEqual(table.others, (1, 2))
        self.assertAlmostEqual(table[1], 5 / 9, places=14)
        self.assertAlmostEqual(table[2], 8 / 9, places=14)
        np.testing.assert_allclose(table.full(), [0.0, 5 / 9, 8 / 9])
        with self.assertRaises(KeyError):
            table[0]

    def test_horizon_zero(self):
        table = hitting_tail(uniform_a_bar(complete_graph(4)), 2, 0)
        self.assertEqual(table.tail, (1.0, 1.0, 1.0))

    def test_complete_graph_tails_are_uniform(self):
        a_bar = uniform_a_bar(complete_graph(5))
        rows = tail_powers(a_bar, 3, 6)
        for k in range(7):
            np.testing.assert_allclose(rows[k], (22 / 26) ** k, rtol=1e-12)

    def test_unreachable_target(self):
        graph = complete_graph(3)
        a_bar = averaged_matrix(uniform_distribution([Matching.identity(3)], graph))
        with self.assertRaises(NotIrreducibleError):
            tail_powers(a_bar, 0, 3)

    def test_invalid_arguments(self):
        a_bar = uniform_a_bar(complete_graph(3))
        with self.assertRaises(InvalidParameterError):
            tail_powers(a_bar, 3, 1)
        with self.assertRaises(InvalidParameterError):
            tail_powers(a_bar, 0, -1)

    def test_monte_carlo_agrees(self):
        a_bar = uniform_a_bar(complete_graph(5))
        table = sample_hitting_tail(a_bar, 0, 3, 20_000, np.random.default_rng(5))
        for j in range(1, 5):
            self.assertAlmostEqual(table[j], (22 / 26) ** 3, delta=0.02)

    def test_monte_carlo_agrees_off_the_complete_graph(self):
        chains = 100_000
        rng = np.random.default_rng(17)
        for name, graph, targets in (
            ("P4", path_graph(4), (0, 1)),
            ("P5", path_graph(5), (0, 2)),
            ("S5", star_graph(5), (0, 3)),
        ):
            a_bar = uniform_a_bar(graph)
            for target in targets:
                for horizon in (1, 3, 6, 10):
                    exact = hitting_tail(a_bar, target, horizon)
                    sampled = sample_hitting_tail(a_bar, target, horizon, chains, rng)
                    for j in exact.others:
                        p = exact[j]
                        se = max(math.sqrt(p * (1 - p) / chains), 1 / chains)
                        with self.subTest(graph=name, target=target, horizon=horizon, start=j):
                            self.assertAlmostEqual(sampled[j], p, delta=4 * se)

    @settings(max_examples=30, deadline=None)
    @given(connected_graphs(), st.data())
    def test_tails_never_increase(self, graph, data):
        target = data.draw(st.integers(min_value=0, max_value=graph.node_count - 1))
        rows = tail_powers(uniform_a_bar(graph), target, 20)
        self.assertTrue(np.all(np.diff(rows, axis=0) <= 1e-14))
        self.assertTrue(np.all(rows[-1] < 1.0))


class BoundParamsTests(TestCase):
    def test_path_graph(self):
        bp = bound_params(uniform_a_bar(path_graph(3)), 0, 2)
        self.assertAlmostEqual(bp.alpha, 8 / 9, places=14)
        self.assertAlmostEqual(bp.beta, 5 / 9, places=14)
        self.assertAlmostEqual(bp.upper_rate, math.log(8 / 9) / 2, places=14)
        self.assertAlmostEqual(bp.lower_rate, math.log(5 / 9) / 2, places=14)
        self.assertGreater(bp.gap, 0)

    def test_two_nodes(self):
        for window in (1, 4, 15):
            bp = bound_params(uniform_a_bar(complete_graph(2)), 1, window)
            self.assertAlmostEqual(bp.alpha, 0.5**window, places=14)
            self.assertAlmostEqual(bp.upper_rate, math.log(0.5), places=12)
            self.assertAlmostEqual(bp.lower_rate, math.log(0.5), places=12)

    def test_complete_graph_rates_do_not_depend_on_window(self):
        params = bounds_vs_window(uniform_a_bar(complete_graph(5)), 0, range(1, 16))
        self.assertEqual([bp.window for bp in params], list(range(1, 16)))
        for bp in params:
            self.assertAlmostEqual(bp.upper_rate, math.log(22 / 26), places=12)
            self.assertAlmostEqual(bp.lower_rate, math.log(22 / 26), places=12)

    def test_window_order_is_preserved(self):
        a_bar = uniform_a_bar(path_graph(4))
        params = bounds_vs_window(a_bar, 0, [7, 3, 12])
        self.assertEqual([bp.window for bp in params], [7, 3, 12])
        self.assertEqual(params[1], bound_params(a_bar, 0, 3))

    def test_vacuous_window(self):
        # the far end of a path cannot reach node 0 in a single round
        with self.assertRaises(DegenerateBoundError):
            bound_params(uniform_a_bar(path_graph(3)), 0, 1)

    def test_certain_hit(self):
        graph = complete_graph(2)
        a_bar = averaged_matrix(explicit_distribution(graph, [((1, 0), 1.0)]))
        bp = bound_params(a_bar, 0, 3)
        self.assertTrue(bp.lower_unbounded)
        self.assertEqual(bp.beta, 0.0)
        self.assertEqual(bp.lower_rate, -math.inf)

    def test_invalid_window(self):
        with self.assertRaises(InvalidParameterError):
            bound_params(uniform_a_bar(complete_graph(3)), 0, 0)
        with self.assertRaises(InvalidParameterError):
            bounds_vs_window(uniform_a_bar(complete_graph(3)), 0, [3, 0])

    @settings(max_examples=30, deadline=None)
    @given(connected_graphs(max_nodes=5), st.integers(min_value=4, max_value=8))
    def test_rates_bracket_the_tails(self, graph, window):
        a_bar = uniform_a_bar(graph)
        bp = bound_params(a_bar, 0, window)
        rows = tail_powers(a_bar, 0, 4 * window)
        for k in range(1, 5):
            self.assertTrue(np.all(rows[k * window] <= bp.alpha**k * (1 + 1e-12)))
            self.assertTrue(np.all(rows[k * window] >= bp.beta**k * (1 - 1e-12)))


class MixedTailTests(TestCase):
    def test_two_nodes_poisson(self):
        a_bar = uniform_a_bar(complete_graph(2))
        for gamma in (0.5, 3.0, 10.0):
            w, _ = PoissonRounds(gamma).weights()
            mixed = mixed_hitting_tail(a_bar, 0, w)
            self.assertEqual(mixed[0], 0.0)
            self.assertAlmostEqual(mixed[1], math.exp(-gamma / 2), places=10)

    def test_point_mass(self):
        a_bar = uniform_a_bar(path_graph(3))
        w, _ = FixedRounds(2).weights()
        np.testing.assert_allclose(mixed_hitting_tail(a_bar, 0, w), [0.0, 5 / 9, 8 / 9])

    def test_invalid_weights(self):
        a_bar = uniform_a_bar(complete_graph(2))
        with self.assertRaises(InvalidParameterError):
            mixed_hitting_tail(a_bar, 0, np.array([]))
        with self.assertRaises(InvalidParameterError):
            mixed_hitting_tail(a_bar, 0, np.array([1.5, -0.5]))


class SpectralTests(TestCase):
    def test_complete_graph(self):
        self.assertAlmostEqual(
            taboo_spectral_radius(uniform_a_bar(complete_graph(5)), 2), 22 / 26, places=12
        )

    def test_two_nodes(self):
        self.assertAlmostEqual(taboo_spectral_radius(uniform_a_bar(complete_graph(2)), 0), 0.5)


class WindowEnvelopeTests(TestCase):
    def test_two_nodes_is_tight_at_window_one(self):
        a_bar = uniform_a_bar(complete_graph(2))
        bp = bound_params(a_bar, 0, 1)
        lower, upper = window_envelope(bp, PoissonRounds(6))
        self.assertAlmostEqual(lower, math.exp(-3), places=10)
        self.assertAlmostEqual(upper, math.exp(-3), places=10)

    def test_envelope_brackets_every_tail(self):
        a_bar = uniform_a_bar(path_graph(4))
        for gamma in (5.0, 20.0, 40.0):
            law = PoissonRounds(gamma)
            bp = bound_params(a_bar, 0, 6)
            lower, upper = window_envelope(bp, law)
            mixed = mixed_hitting_tail(a_bar, 0, law.weights()[0])[1:]
            self.assertTrue(np.all(mixed >= lower * (1 - 1e-9)))
            self.assertTrue(np.all(mixed <= upper * (1 + 1e-9)))
