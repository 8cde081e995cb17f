"""
Per-period gossip: round counts, matching draws, pointer propagation and reach sets.

Within a period the vector of held observations evolves as s^m(i) = s^{m-1}(partner_m(i)),
starting from s^0(i) = i, and sensor i ends the period with the observations of every sensor
in the union of s^0(i), ..., s^M(i). Reach sets are bit masks over node indices.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import InvalidParameterError, TooLargeError, TopologyError
from .markov import mixed_hitting_tail
from .rounds import (
    DEFAULT_TAIL_EPS,
    InvalidEpsError,  # noqa: F401
    PoissonRounds,
    RoundLaw,
    check_tail_eps,
    sample_round_count,  # noqa: F401
)
from .topology import (
    AveragedMatrix,
    Matching,
    MatchingDistribution,
    MatchingLaw,
)

logger = logging.getLogger(__name__)

EXACT_SUBSET_MAX_NODES = 7
MAX_MASK_NODES = 20
SUM_TOLERANCE = 1e-10
MC_BLOCK = 4096


class NotEnumerableError(TopologyError):
    code = "E_NOT_ENUMERABLE"


@dataclass(frozen=True)
class ReachSet:
    bits: int
    owner: int

    def __post_init__(self):
        if not (self.bits >> self.owner) & 1:
            raise InvalidParameterError(
                f"Reach set {self.bits:#b} does not contain its owner {self.owner}"
            )

    def members(self) -> Tuple[int, ...]:
        return mask_members(self.bits)

    def __contains__(self, node: int) -> bool:
        return bool((self.bits >> node) & 1)

    def __len__(self):
        return bin(self.bits).count("1")

    def __str__(self):
        return "{" + ", ".join(map(str, self.members())) + "}"


def mask_members(mask: int) -> Tuple[int, ...]:
    members = []
    i = 0
    while mask:
        if mask & 1:
            members.append(i)
        mask >>= 1
        i += 1
    return tuple(members)


@dataclass(frozen=True)
class GossipPeriod:
    round_count: int
    matchings: Tuple[Matching, ...]

    def __post_init__(self):
        if self.round_count != len(self.matchings):
            raise InvalidParameterError(
                f"A period of {self.round_count} rounds cannot hold {len(self.matchings)} matchings"
            )


def sample_period(
    law: MatchingLaw, round_law: RoundLaw, rng: np.random.Generator
) -> GossipPeriod:
    m = round_law.sample(rng)
    return GossipPeriod(round_count=m, matchings=tuple(law.sample_many(m, rng)))


def propagate_all(period: GossipPeriod, node_count: Optional[int] = None) -> np.ndarray:
    """Returns the reach mask of every owner after the period's rounds"""
    if node_count is None:
        if not period.matchings:
            raise InvalidParameterError(
                "node_count is required to propagate a period without rounds"
            )
        node_count = period.matchings[0].node_count
    holders = np.arange(node_count)
    masks = np.left_shift(1, holders, dtype=np.int64)
    for matching in period.matchings:
        holders = holders[list(matching.partner)]
        updated = masks | np.left_shift(1, holders, dtype=np.int64)
        assert np.all((updated & masks) == masks)
        masks = updated
    return masks


def propagate(
    period: GossipPeriod, owner: int, node_count: Optional[int] = None
) -> ReachSet:
    if node_count is None and not period.matchings:
        # an empty period reaches only the owner
        node_count = owner + 1
    masks = propagate_all(period, node_count)
    return ReachSet(bits=int(masks[owner]), owner=owner)


def _partner_table(dist: MatchingDistribution) -> np.ndarray:
    """Rows are the partner arrays of the support, followed by the identity"""
    n = dist.support_graph.node_count
    return np.array([m.partner for m in dist.matchings] + [tuple(range(n))], dtype=np.int64)


def sample_reach_masks(
    law: MatchingLaw, round_law: RoundLaw, periods: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Simulates `periods` independent gossip periods and returns a (periods, N) array of reach
    masks. Enumerated laws are simulated for every period of the block at once.
    """
    n = law.support_graph.node_count
    if n > MAX_MASK_NODES:
        raise TooLargeError(f"Reach masks are limited to {MAX_MASK_NODES} nodes, not {n}")
    if not isinstance(law, MatchingDistribution):
        out = np.empty((periods, n), dtype=np.int64)
        for p in range(periods):
            out[p] = propagate_all(sample_period(law, round_law, rng), n)
        return out
    rounds = np.array([round_law.sample(rng) for _ in range(periods)], dtype=np.int64)
    longest = int(rounds.max()) if periods else 0
    table = _partner_table(law)
    identity_row = len(table) - 1
    cumulative = np.cumsum(law.weights)
    draws = np.minimum(
        np.searchsorted(cumulative, rng.random((periods, longest)) * cumulative[-1], side="right"),
        identity_row - 1,
    )
    # rounds past a period's own count do nothing
    draws[np.arange(longest)[None, :] >= rounds[:, None]] = identity_row
    holders = np.tile(np.arange(n, dtype=np.int64), (periods, 1))
    masks = np.left_shift(1, holders)
    for m in range(longest):
        holders = np.take_along_axis(holders, table[draws[:, m]], axis=1)
        masks |= np.left_shift(1, holders)
    return masks


@dataclass(frozen=True, eq=False)
class SubsetDistribution:
    owner: int
    mean_rounds: float
    probs: np.ndarray
    method: str = "exact"
    stderr: Optional[np.ndarray] = None
    trials: Optional[int] = None
    truncated_mass: float = 0.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        size = len(probs)
        if size < 2 or size & (size - 1):
            raise InvalidParameterError(f"A subset distribution needs 2^N entries, not {size}")
        if not 0 <= self.owner < self.node_count:
            raise InvalidParameterError(f"Owner {self.owner} is out of range")
        if np.any(probs < 0):
            raise InvalidParameterError("Subset probabilities must be non-negative")
        total = math.fsum(probs)
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise InvalidParameterError(f"Subset probabilities sum to {total!r}, not 1")
        without_owner = (np.arange(size) >> self.owner) & 1 == 0
        if np.any(probs[without_owner] != 0):
            raise InvalidParameterError(
                f"Subsets without owner {self.owner} must have zero probability"
            )
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def node_count(self) -> int:
        return len(self.probs).bit_length() - 1

    @property
    def full_mask(self) -> int:
        return len(self.probs) - 1

    def support(self) -> Iterator[Tuple[int, float]]:
        for mask in np.flatnonzero(self.probs):
            yield int(mask), float(self.probs[mask])


def incomplete_probability(sd: SubsetDistribution) -> float:
    return math.fsum(sd.probs[: sd.full_mask])


def inclusion_probabilities(sd: SubsetDistribution) -> np.ndarray:
    """P(j in O^owner) for every node j"""
    masks = np.arange(len(sd.probs))
    return np.array(
        [math.fsum(sd.probs[(masks >> j) & 1 == 1]) for j in range(sd.node_count)]
    )


def inclusion_probabilities_exact(
    a_bar: AveragedMatrix,
    owner: int,
    round_law: RoundLaw,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> np.ndarray:
    """
    P(j in O^owner) through the hitting-time tails: sensor j's observation reaches the owner
    within a period exactly when the chain started at j hits the owner within M rounds.
    """
    weights, _ = round_law.weights(tail_eps)
    result = 1.0 - mixed_hitting_tail(a_bar, owner, weights)
    result[owner] = 1.0
    return result


class _HolderChain:
    """
    The exact law of (holder permutation, owner reach mask) after m rounds, advanced one
    round at a time. Holder permutations are restricted to those reachable from the identity.
    """

    def __init__(self, dist: MatchingDistribution, owner: int):
        n = dist.support_graph.node_count
        self.node_count = n
        self.owner = owner
        self.weights = dist.weights
        partners = [np.array(m.partner) for m in dist.matchings]

        index: Dict[Tuple[int, ...], int] = {tuple(range(n)): 0}
        perms: List[Tuple[int, ...]] = [tuple(range(n))]
        successors: List[List[int]] = [[] for _ in partners]
        frontier = 0
        while frontier < len(perms):
            s = np.array(perms[frontier])
            for k, partner in enumerate(partners):
                t = tuple(s[partner].tolist())
                if t not in index:
                    index[t] = len(perms)
                    perms.append(t)
                successors[k].append(index[t])
            frontier += 1
        self.successors = [np.array(s) for s in successors]
        holders = np.array(perms)
        self.new_bits = [
            np.left_shift(1, holders[:, partner[owner]]) for partner in partners
        ]
        self.masks = np.arange(1 << n)
        self.state = np.zeros((len(perms), 1 << n))
        self.state[0, 1 << owner] = 1.0
        logger.debug(
            f"Holder chain for owner {owner}: {len(perms)} permutations x {1 << n} masks"
        )

    def marginal(self) -> np.ndarray:
        return self.state.sum(axis=0)

    def advance(self):
        nxt = np.zeros_like(self.state)
        for successor, bits, weight in zip(self.successors, self.new_bits, self.weights):
            has_bit = (self.masks[None, :] & bits[:, None]) != 0
            without_bit = self.masks[None, :] ^ bits[:, None]
            folded = np.where(
                has_bit,
                self.state + np.take_along_axis(self.state, without_bit, axis=1),
                0.0,
            )
            moved = np.empty_like(folded)
            moved[successor] = folded
            nxt += weight * moved
        self.state = nxt


def _check_exact(dist: MatchingLaw, owner: int):
    if not isinstance(dist, MatchingDistribution) or not dist.enumerable:
        raise NotEnumerableError(
            "Exact subset distributions need an enumerated matching distribution"
        )
    n = dist.support_graph.node_count
    if n > EXACT_SUBSET_MAX_NODES:
        raise TooLargeError(
            f"Exact subset distributions are limited to {EXACT_SUBSET_MAX_NODES} nodes, not "
            f"{n}; use the Monte Carlo estimator instead"
        )
    if not 0 <= owner < n:
        raise InvalidParameterError(f"Owner {owner} is not a node of the {n}-node network")


def subset_distributions_exact(
    dist: MatchingLaw,
    gammas: Sequence[float],
    owner: int,
    tail_eps: float = DEFAULT_TAIL_EPS,
    rounds: Callable[[float], RoundLaw] = PoissonRounds,
) -> List[SubsetDistribution]:
    """Computes the exact subset distribution for every mean round count in `gammas`,
    advancing the holder chain once for the whole grid"""
    check_tail_eps(tail_eps)
    _check_exact(dist, owner)
    assert isinstance(dist, MatchingDistribution)
    laws = [rounds(gamma) for gamma in gammas]
    weights = [law.weights(tail_eps) for law in laws]
    horizon = max((len(w) for w, _ in weights), default=1)
    chain = _HolderChain(dist, owner)
    marginals = [chain.marginal()]
    for _ in range(1, horizon):
        chain.advance()
        marginals.append(chain.marginal())
    stacked = np.array(marginals)
    results = []
    for law, (w, truncated) in zip(laws, weights):
        probs = w @ stacked[: len(w)]
        probs = np.where(probs < 0, 0.0, probs)
        results.append(
            SubsetDistribution(
                owner=owner,
                mean_rounds=law.gamma,
                probs=probs / math.fsum(probs),
                method="exact",
                truncated_mass=truncated,
            )
        )
    return results


def subset_distribution_exact(
    dist: MatchingLaw,
    gamma: float,
    owner: int,
    tail_eps: float = DEFAULT_TAIL_EPS,
    rounds: Callable[[float], RoundLaw] = PoissonRounds,
) -> SubsetDistribution:
    return subset_distributions_exact(dist, [gamma], owner, tail_eps, rounds)[0]


def subset_distribution_mc(
    law: MatchingLaw,
    gamma: float,
    owner: int,
    trials: int,
    rng: np.random.Generator,
    rounds: Callable[[float], RoundLaw] = PoissonRounds,
) -> SubsetDistribution:
    if trials < 1:
        raise InvalidParameterError(f"At least one trial is required, not {trials}")
    n = law.support_graph.node_count
    if not 0 <= owner < n:
        raise InvalidParameterError(f"Owner {owner} is not a node of the {n}-node network")
    round_law = rounds(gamma)
    counts = np.zeros(1 << n, dtype=np.int64)
    remaining = trials
    while remaining:
        block = min(remaining, MC_BLOCK)
        masks = sample_reach_masks(law, round_law, block, rng)[:, owner]
        counts += np.bincount(masks, minlength=1 << n)
        remaining -= block
    probs = counts / trials
    return SubsetDistribution(
        owner=owner,
        mean_rounds=round_law.gamma,
        probs=probs,
        method="mc",
        stderr=np.sqrt(probs * (1.0 - probs) / trials),
        trials=trials,
    )
