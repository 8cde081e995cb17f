import os
from typing import Optional

import numpy as np

from gossipqcd.experiments import ExperimentConfig
from gossipqcd.obsmodel import Gaussian, ObservationModel, SensorDensityPair
from gossipqcd.topology import (
    Graph,
    MatchingDistribution,
    averaged_matrix,
    build_graph,
    complete_graph,
    enumerate_matchings,
    uniform_distribution,
)

SLOW = bool(os.environ.get("GOSSIPQCD_SLOW"))


def path_graph(n: int) -> Graph:
    return build_graph(n, [(i, i + 1) for i in range(n - 1)])


def star_graph(n: int) -> Graph:
    """Node 0 is the hub"""
    return build_graph(n, [(0, i) for i in range(1, n)])


def uniform_law(graph: Graph) -> MatchingDistribution:
    return uniform_distribution(enumerate_matchings(graph), graph)


def uniform_a_bar(graph: Graph):
    return averaged_matrix(uniform_law(graph))


def shifted_gaussians(n: int, step: float = 0.1) -> ObservationModel:
    """Sensor i shifts from N(0, 1) to N(step * (i + 1), 1)"""
    return ObservationModel(
        tuple(
            SensorDensityPair(Gaussian(0.0, 1.0), Gaussian(step * (i + 1), 1.0))
            for i in range(n)
        )
    )


REFERENCE_KLS = np.array([0.005, 0.02, 0.045, 0.08, 0.125])


def small_config(graph: Optional[Graph] = None, step: float = 0.5, **changes) -> ExperimentConfig:
    """A quick experiment on K3 with strong signals, unless told otherwise"""
    if graph is None:
        graph = complete_graph(3)
    settings = dict(
        thresholds=(10.0, 100.0, 1000.0),
        trials_per_threshold=200,
        max_horizon=500,
        master_seed=7,
        gamma=2.0,
    )
    settings.update(changes)
    return ExperimentConfig(
        graph=graph,
        law=uniform_law(graph),
        model=shifted_gaussians(graph.node_count, step=step),
        **settings,
    )


def reference_like(**changes) -> ExperimentConfig:
    """K5 with the 0.1-step Gaussian shifts at gamma 6, unless told otherwise"""
    changes.setdefault("gamma", 6.0)
    return small_config(complete_graph(5), step=0.1, **changes)
