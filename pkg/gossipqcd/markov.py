"""
Exact analysis of the observation-pointer Markov chain whose kernel is the averaged matrix.

Every quantity here is computed from the taboo kernel Q, which is the averaged matrix with
the target's row and column removed: the probability that a chain started at j has not hit
the target after k steps is (Q^k 1)_j.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import networkx as nx
import numpy as np

from .exceptions import AnalysisError, InvalidParameterError
from .rounds import DEFAULT_TAIL_EPS, RoundLaw
from .topology import AveragedMatrix

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 15


class NotIrreducibleError(AnalysisError):
    code = "E_NOT_IRREDUCIBLE"


class DegenerateBoundError(AnalysisError):
    code = "E_DEGENERATE_BOUND"


@dataclass(frozen=True)
class HittingTailTable:
    target: int
    horizon: int
    others: Tuple[int, ...]
    """the starting states j != target, in increasing order"""
    tail: Tuple[float, ...]
    """tail[k] = P(T_{others[k]} > horizon)"""

    def __getitem__(self, j: int) -> float:
        try:
            return self.tail[self.others.index(j)]
        except ValueError:
            raise KeyError(j)

    def full(self) -> np.ndarray:
        """The tails indexed by node, with zero at the target"""
        result = np.zeros(len(self.others) + 1)
        result[list(self.others)] = self.tail
        return result


@dataclass(frozen=True)
class BoundParams:
    target: int
    window: int
    alpha: float
    beta: float
    upper_rate: float
    lower_rate: float
    lower_unbounded: bool = False

    @property
    def gap(self) -> float:
        return self.upper_rate - self.lower_rate


def _check_target(a_bar: AveragedMatrix, target: int):
    if not 0 <= target < a_bar.node_count:
        raise InvalidParameterError(
            f"Target {target} is not a node of the {a_bar.node_count}-node chain"
        )


def check_target_reachable(a_bar: AveragedMatrix, target: int):
    """Raises NotIrreducibleError unless every state can reach `target`"""
    _check_target(a_bar, target)
    pattern = nx.DiGraph()
    pattern.add_nodes_from(range(a_bar.node_count))
    rows, cols = np.nonzero(a_bar.entries > 0)
    pattern.add_edges_from(zip(rows.tolist(), cols.tolist()))
    unreachable = set(range(a_bar.node_count)) - nx.ancestors(pattern, target) - {target}
    if unreachable:
        raise NotIrreducibleError(
            f"State(s) {', '.join(map(str, sorted(unreachable)))} can never reach state "
            f"{target}; their hitting-time tails do not decay"
        )


def _others(a_bar: AveragedMatrix, target: int) -> Tuple[int, ...]:
    return tuple(j for j in range(a_bar.node_count) if j != target)


def tail_powers(a_bar: AveragedMatrix, target: int, horizon: int) -> np.ndarray:
    """Returns the (horizon + 1) x (N - 1) array whose row k is Q^k 1"""
    if horizon < 0:
        raise InvalidParameterError(f"The horizon must be non-negative, not {horizon}")
    check_target_reachable(a_bar, target)
    q = a_bar.taboo(target)
    rows = np.empty((horizon + 1, q.shape[0]))
    rows[0] = 1.0
    for k in range(1, horizon + 1):
        rows[k] = q @ rows[k - 1]
    np.clip(rows, 0.0, 1.0, out=rows)
    return rows


def hitting_tail(a_bar: AveragedMatrix, target: int, horizon: int) -> HittingTailTable:
    tails = tail_powers(a_bar, target, horizon)[-1]
    return HittingTailTable(
        target=target,
        horizon=horizon,
        others=_others(a_bar, target),
        tail=tuple(float(t) for t in tails),
    )


def _bound_params_from_tail(target: int, window: int, tail: np.ndarray) -> BoundParams:
    alpha = float(np.max(tail))
    beta = float(np.min(tail))
    if alpha >= 1.0:
        raise DegenerateBoundError(
            f"alpha = max_j P(T_j > {window}) = {alpha!r} for target {target}; the chain "
            "can avoid the target indefinitely and the bound is vacuous"
        )
    if beta <= 0.0:
        logger.warning(
            f"beta = 0 for target {target} at window {window}; the lower rate is unbounded"
        )
        return BoundParams(
            target=target,
            window=window,
            alpha=alpha,
            beta=0.0,
            upper_rate=math.log(alpha) / window if alpha > 0 else -math.inf,
            lower_rate=-math.inf,
            lower_unbounded=True,
        )
    return BoundParams(
        target=target,
        window=window,
        alpha=alpha,
        beta=beta,
        upper_rate=math.log(alpha) / window,
        lower_rate=math.log(beta) / window,
    )


def bound_params(a_bar: AveragedMatrix, target: int, window: int = DEFAULT_WINDOW) -> BoundParams:
    if window < 1:
        raise InvalidParameterError(f"The window L must be at least 1, not {window}")
    return _bound_params_from_tail(
        target, window, tail_powers(a_bar, target, window)[-1]
    )


def bounds_vs_window(
    a_bar: AveragedMatrix, target: int, windows: Iterable[int]
) -> List[BoundParams]:
    windows = list(windows)
    for window in windows:
        if window < 1:
            raise InvalidParameterError(f"The window L must be at least 1, not {window}")
    if not windows:
        return []
    # one pass of matrix-vector products serves every window
    rows = tail_powers(a_bar, target, max(windows))
    results = [_bound_params_from_tail(target, window, rows[window]) for window in windows]
    logger.debug(
        f"Computed bound parameters for target {target} over {len(windows)} window(s)"
    )
    return results


def mixed_hitting_tail(
    a_bar: AveragedMatrix, target: int, weights: np.ndarray
) -> np.ndarray:
    """
    Returns sum_m weights[m] * Q^m 1, indexed by node with zero at the target.

    With `weights` the law of the number of rounds M, entry j is P(T_j > M): the probability
    that sensor j's observation does not arrive at the target within one period.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or len(weights) == 0 or np.any(weights < 0):
        raise InvalidParameterError("Round weights must be a non-empty non-negative vector")
    rows = tail_powers(a_bar, target, len(weights) - 1)
    mixed = weights @ rows
    result = np.zeros(a_bar.node_count)
    result[list(_others(a_bar, target))] = np.clip(mixed, 0.0, 1.0)
    return result


def sample_hitting_tail(
    a_bar: AveragedMatrix,
    target: int,
    horizon: int,
    chains: int,
    rng: np.random.Generator,
) -> HittingTailTable:
    """Estimates the hitting-time tails by simulating `chains` chains from every j != target"""
    if chains < 1:
        raise InvalidParameterError(f"At least one chain is required, not {chains}")
    check_target_reachable(a_bar, target)
    others = _others(a_bar, target)
    cumulative = np.cumsum(a_bar.entries, axis=1)
    last = a_bar.node_count - 1
    states = np.repeat(np.array(others)[:, None], chains, axis=1)
    hit = np.zeros(states.shape, dtype=bool)
    for _ in range(horizon):
        u = rng.random(states.shape)
        states = np.minimum((u[..., None] >= cumulative[states]).sum(axis=-1), last)
        hit |= states == target
    return HittingTailTable(
        target=target,
        horizon=horizon,
        others=others,
        tail=tuple(float(t) for t in 1.0 - hit.mean(axis=1)),
    )


def taboo_spectral_radius(a_bar: AveragedMatrix, target: int) -> float:
    """The largest eigenvalue of the (symmetric) taboo kernel; tails decay like its powers"""
    check_target_reachable(a_bar, target)
    q = a_bar.taboo(target)
    if q.size == 0:
        return 0.0
    return float(np.max(np.linalg.eigvalsh(q)))


def window_envelope(
    bp: BoundParams, round_law: RoundLaw, tail_eps: float = DEFAULT_TAIL_EPS
) -> Tuple[float, float]:
    """
    Returns (E[beta^ceil(M/L)], E[alpha^floor(M/L)]) under the round law. Every tail
    P(T_j > M) lies between the two, since P(T_j > kL) is bracketed by beta^k and alpha^k
    and tails do not increase with the horizon.
    """
    window = bp.window
    lower = round_law.expect(lambda m: bp.beta ** np.ceil(m / window), tail_eps)
    upper = round_law.expect(lambda m: bp.alpha ** np.floor(m / window), tail_eps)
    return lower, upper
