"""
Sensor network graphs, the matchings allowed on them, and the averaged matrix.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from .exceptions import InvalidParameterError, TooLargeError, TopologyError

logger = logging.getLogger(__name__)

MAX_ENUMERATION_NODES = 12
PROBABILITY_TOLERANCE = 1e-12


class InvalidEdgeError(TopologyError):
    code = "E_INVALID_EDGE"


class DisconnectedGraphError(TopologyError):
    code = "E_DISCONNECTED"


class InvalidMatchingError(TopologyError):
    code = "E_INVALID_MATCHING"


class EmptySupportError(TopologyError):
    code = "E_EMPTY_SUPPORT"


class InvalidDistributionError(TopologyError):
    code = "E_INVALID_DISTRIBUTION"


@dataclass(frozen=True)
class Graph:
    node_count: int
    edges: FrozenSet[Tuple[int, int]]
    connected: bool

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return tuple(
            sorted(b if a == i else a for a, b in self.edges if i in (a, b))
        )

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.node_count))
        g.add_edges_from(self.edges)
        return g

    @property
    def adjacency(self) -> np.ndarray:
        """The adjacency matrix with the implicit unit diagonal"""
        a = np.eye(self.node_count, dtype=int)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1
        return a

    def sorted_edges(self) -> List[Tuple[int, int]]:
        return sorted(self.edges)


def build_graph(node_count: int, edges: Iterable[Sequence[int]]) -> Graph:
    if node_count < 2:
        raise InvalidEdgeError(f"A sensor network needs at least two nodes, not {node_count}")
    normalized: set[Tuple[int, int]] = set()
    for edge in edges:
        if len(edge) != 2:
            raise InvalidEdgeError(f"Edge {tuple(edge)!r} is not a pair of node indices")
        i, j = int(edge[0]), int(edge[1])
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise InvalidEdgeError(
                f"Edge ({i}, {j}) references a node outside of [0, {node_count})"
            )
        if i == j:
            raise InvalidEdgeError(
                f"Edge ({i}, {j}) is a self-loop; self-communication is implicit"
            )
        key = (min(i, j), max(i, j))
        if key in normalized:
            raise InvalidEdgeError(f"Edge {key} is listed more than once")
        normalized.add(key)
    graph = Graph(node_count=node_count, edges=frozenset(normalized), connected=False)
    connected = nx.is_connected(graph.to_networkx())
    if not connected:
        components = list(nx.connected_components(graph.to_networkx()))
        raise DisconnectedGraphError(
            f"The network is not connected; it has {len(components)} components: "
            f"{', '.join(str(sorted(c)) for c in components)}"
        )
    return Graph(node_count=node_count, edges=graph.edges, connected=True)


def complete_graph(node_count: int) -> Graph:
    return build_graph(
        node_count,
        [(i, j) for i in range(node_count) for j in range(i + 1, node_count)],
    )


@dataclass(frozen=True)
class Matching:
    partner: Tuple[int, ...]

    def __post_init__(self):
        n = len(self.partner)
        for i, p in enumerate(self.partner):
            if not 0 <= p < n:
                raise InvalidMatchingError(f"partner[{i}] = {p} is out of range")
            if self.partner[p] != i:
                raise InvalidMatchingError(
                    f"{self.partner!r} is not an involution: partner[partner[{i}]] != {i}"
                )

    @classmethod
    def identity(cls, node_count: int) -> "Matching":
        return cls(tuple(range(node_count)))

    @property
    def node_count(self) -> int:
        return len(self.partner)

    def pairs(self) -> Iterator[Tuple[int, int]]:
        for i, p in enumerate(self.partner):
            if i < p:
                yield i, p

    def is_valid_for(self, graph: Graph) -> bool:
        return self.node_count == graph.node_count and all(
            graph.has_edge(i, j) for i, j in self.pairs()
        )

    def permutation_matrix(self) -> np.ndarray:
        n = self.node_count
        p = np.zeros((n, n))
        p[np.arange(n), self.partner] = 1.0
        return p

    def __str__(self):
        pairs = " ".join(f"{i}<->{j}" for i, j in self.pairs())
        return pairs or "identity"


def enumerate_matchings(
    graph: Graph, max_nodes: int = MAX_ENUMERATION_NODES
) -> List[Matching]:
    if graph.node_count > max_nodes:
        raise TooLargeError(
            f"Refusing to enumerate the matchings of a {graph.node_count}-node graph "
            f"(the cap is {max_nodes} nodes)"
        )
    n = graph.node_count
    neighbors = [graph.neighbors(i) for i in range(n)]
    partner: List[Optional[int]] = [None] * n
    found: List[Matching] = []

    def assign(i: int):
        while i < n and partner[i] is not None:
            i += 1
        if i == n:
            found.append(Matching(tuple(partner)))  # type: ignore
            return
        partner[i] = i
        assign(i + 1)
        for j in neighbors[i]:
            if j > i and partner[j] is None:
                partner[i], partner[j] = j, i
                assign(i + 1)
                partner[j] = None
        partner[i] = None

    assign(0)
    found.sort(key=lambda m: m.partner)
    logger.debug(f"Enumerated {len(found)} matchings on {n} nodes")
    return found


class MatchingLaw(ABC):
    """A law over the matchings of a graph that can be sampled from"""

    support_graph: Graph

    @property
    @abstractmethod
    def enumerable(self) -> bool:
        raise NotImplementedError()

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> Matching:
        raise NotImplementedError()

    def sample_many(self, count: int, rng: np.random.Generator) -> List[Matching]:
        return [self.sample(rng) for _ in range(count)]


@dataclass(frozen=True)
class MatchingDistribution(MatchingLaw):
    entries: Tuple[Tuple[Matching, float], ...]
    support_graph: Graph
    _cumulative: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise EmptySupportError("A matching distribution needs at least one matching")
        for matching, weight in self.entries:
            if not weight > 0:
                raise InvalidDistributionError(
                    f"Matching {matching} has non-positive weight {weight!r}"
                )
            if not matching.is_valid_for(self.support_graph):
                raise InvalidDistributionError(
                    f"Matching {matching} is not valid for the support graph"
                )
        total = sum(w for _, w in self.entries)
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise InvalidDistributionError(
                f"Matching weights sum to {total!r}, not 1"
            )
        cumulative = np.cumsum([w for _, w in self.entries])
        cumulative.setflags(write=False)
        object.__setattr__(self, "_cumulative", cumulative)

    @property
    def enumerable(self) -> bool:
        return True

    @property
    def matchings(self) -> Tuple[Matching, ...]:
        return tuple(m for m, _ in self.entries)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.entries])

    def sample_index(self, rng: np.random.Generator) -> int:
        u = rng.random() * self._cumulative[-1]
        return min(
            int(np.searchsorted(self._cumulative, u, side="right")),
            len(self.entries) - 1,
        )

    def sample(self, rng: np.random.Generator) -> Matching:
        return self.entries[self.sample_index(rng)][0]


def uniform_distribution(
    matchings: Sequence[Matching], graph: Optional[Graph] = None
) -> MatchingDistribution:
    if not matchings:
        raise EmptySupportError("Cannot build a uniform distribution over no matchings")
    if graph is None:
        # the smallest graph supporting every matching
        n = matchings[0].node_count
        edges = {e for m in matchings for e in m.pairs()}
        graph = Graph(
            node_count=n,
            edges=frozenset(edges),
            connected=nx.is_connected(
                Graph(n, frozenset(edges), False).to_networkx()
            ),
        )
    weight = 1.0 / len(matchings)
    return MatchingDistribution(
        entries=tuple((m, weight) for m in matchings), support_graph=graph
    )


def explicit_distribution(
    graph: Graph, entries: Iterable[Tuple[Sequence[int], float]]
) -> MatchingDistribution:
    return MatchingDistribution(
        entries=tuple(
            (Matching(tuple(int(p) for p in partner)), float(weight))
            for partner, weight in entries
        ),
        support_graph=graph,
    )


@dataclass(frozen=True)
class SequentialMatchingSampler(MatchingLaw):
    """Draws a matching by repeatedly pairing a random unmatched node with a random
    unmatched neighbor or itself. The induced law is never enumerated."""

    support_graph: Graph

    @property
    def enumerable(self) -> bool:
        return False

    def sample(self, rng: np.random.Generator) -> Matching:
        n = self.support_graph.node_count
        partner = list(range(n))
        unmatched = set(range(n))
        neighbors = [self.support_graph.neighbors(i) for i in range(n)]
        while unmatched:
            pool = sorted(unmatched)
            i = pool[int(rng.integers(len(pool)))]
            options = [i] + [j for j in neighbors[i] if j in unmatched]
            j = options[int(rng.integers(len(options)))]
            partner[i], partner[j] = j, i
            unmatched.discard(i)
            unmatched.discard(j)
        return Matching(tuple(partner))


@dataclass(frozen=True, eq=False)
class AveragedMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidParameterError(f"Expected a square matrix, got shape {a.shape}")
        if np.any(a < 0) or np.any(a > 1):
            raise InvalidParameterError("Averaged matrix entries must lie in [0, 1]")
        if not np.allclose(a, a.T, rtol=0, atol=PROBABILITY_TOLERANCE):
            raise InvalidParameterError("The averaged matrix must be symmetric")
        if not (
            np.allclose(a.sum(axis=1), 1.0, rtol=0, atol=PROBABILITY_TOLERANCE)
            and np.allclose(a.sum(axis=0), 1.0, rtol=0, atol=PROBABILITY_TOLERANCE)
        ):
            raise InvalidParameterError("The averaged matrix must be doubly stochastic")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def node_count(self) -> int:
        return self.entries.shape[0]

    def taboo(self, target: int) -> np.ndarray:
        """The kernel restricted to every state except `target`"""
        keep = [j for j in range(self.node_count) if j != target]
        return self.entries[np.ix_(keep, keep)]


def averaged_matrix(dist: MatchingDistribution) -> AveragedMatrix:
    n = dist.support_graph.node_count
    a = np.zeros((n, n))
    rows = np.arange(n)
    for matching, weight in dist.entries:
        a[rows, matching.partner] += weight
    return AveragedMatrix(a)


def check_irreducible_aperiodic(a_bar: AveragedMatrix) -> bool:
    pattern = nx.DiGraph()
    pattern.add_nodes_from(range(a_bar.node_count))
    rows, cols = np.nonzero(a_bar.entries > 0)
    pattern.add_edges_from(zip(rows.tolist(), cols.tolist()))
    return nx.is_strongly_connected(pattern) and nx.is_aperiodic(pattern)
