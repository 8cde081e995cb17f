"""
The invariant suite behind `gossipqcd validate`.

Each check recomputes a quantity along two independent paths, or verifies a structural
property, on the loaded configuration. Checks are deterministic: random inputs come from a
fixed seed unless one is supplied.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from .detector import (
    DetectorConfig,
    DetectorMode,
    DetectorState,
    batch_log_statistic,
    decompose,
    llr_sum,
    step,
)
from .exceptions import GossipQCDError
from .experiments import ExperimentConfig
from .gossip import (
    EXACT_SUBSET_MAX_NODES,
    SUM_TOLERANCE,
    incomplete_probability,
    inclusion_probabilities,
    inclusion_probabilities_exact,
    subset_distribution_mc,
    subset_distributions_exact,
)
from .markov import DEFAULT_WINDOW, bound_params, tail_powers, window_envelope
from .obsmodel import Gaussian, distributed_kl, kl_number_quadrature, kl_number_with_error
from .rounds import RoundLaw
from .topology import MatchingDistribution, check_irreducible_aperiodic

logger = logging.getLogger(__name__)

VALIDATION_SEED = 0
MC_TRIALS = 20_000
MC_SIGMAS = 4.0
ORACLE_TOLERANCE = 1e-9
TABULATED_KL_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    skipped: bool = False


Check = Callable[[ExperimentConfig, np.random.Generator], Tuple[bool, str]]
_CHECKS: List[Tuple[str, Check]] = []


def check(name: str):
    def wrapper(func: Check) -> Check:
        _CHECKS.append((name, func))
        return func

    return wrapper


class SkipCheck(Exception):
    pass


def _enumerated(config: ExperimentConfig) -> MatchingDistribution:
    if not isinstance(config.law, MatchingDistribution):
        raise SkipCheck("the matching law is not enumerated")
    return config.law


def _exact_sized(config: ExperimentConfig):
    if config.node_count > EXACT_SUBSET_MAX_NODES:
        raise SkipCheck(f"more than {EXACT_SUBSET_MAX_NODES} nodes")


@check("matchings are edge-respecting involutions")
def _matchings(config, rng):
    law = _enumerated(config)
    bad = [str(m) for m in law.matchings if not m.is_valid_for(config.graph)]
    return not bad, f"{len(law.matchings)} matchings" if not bad else f"invalid: {', '.join(bad)}"


@check("averaged matrix is irreducible and aperiodic")
def _irreducible(config, rng):
    _enumerated(config)
    return check_irreducible_aperiodic(config.a_bar), ""


@check("hitting tails start at 1 and never increase")
def _tails_monotone(config, rng):
    _enumerated(config)
    a_bar = config.a_bar
    for target in range(config.node_count):
        rows = tail_powers(a_bar, target, 3 * DEFAULT_WINDOW)
        if not np.all(rows[0] == 1.0):
            return False, f"target {target}: tails at horizon 0 are not 1"
        if np.any(np.diff(rows, axis=0) > 1e-14):
            return False, f"target {target}: a tail increases with the horizon"
    return True, f"{config.node_count} targets, horizons 0..{3 * DEFAULT_WINDOW}"


@check("hitting tails decay between beta^k and alpha^k")
def _tails_geometric(config, rng):
    _enumerated(config)
    a_bar = config.a_bar
    window = DEFAULT_WINDOW
    for target in range(config.node_count):
        bp = bound_params(a_bar, target, window)
        rows = tail_powers(a_bar, target, 5 * window)
        for k in range(1, 6):
            tail = rows[k * window]
            if np.any(tail > bp.alpha**k * (1 + 1e-12)) or np.any(tail < bp.beta**k * (1 - 1e-12)):
                return False, f"target {target}, k={k}"
    return True, f"L={window}, k=1..5"


def _exact_distributions(config: ExperimentConfig, gammas):
    _enumerated(config)
    _exact_sized(config)
    factory = RoundLaw.factory(config.rounds)
    for owner in range(config.node_count):
        yield owner, subset_distributions_exact(config.law, gammas, owner, rounds=factory)


@check("exact subset distributions are normalized and contain their owner")
def _subset_normalized(config, rng):
    worst = 0.0
    for owner, (sd,) in _exact_distributions(config, [config.gamma]):
        worst = max(worst, abs(math.fsum(sd.probs) - 1.0))
    return worst <= SUM_TOLERANCE, f"largest normalization error {worst:.3g}"


@check("subset inclusion marginals match the hitting-time path")
def _inclusion_oracle(config, rng):
    worst = 0.0
    law = config.round_law
    for owner, (sd,) in _exact_distributions(config, [config.gamma]):
        via_tails = inclusion_probabilities_exact(config.a_bar, owner, law)
        worst = max(worst, float(np.max(np.abs(inclusion_probabilities(sd) - via_tails))))
    return worst <= ORACLE_TOLERANCE, f"largest difference {worst:.3g}"


@check("exact and Monte Carlo subset distributions agree")
def _subset_mc(config, rng):
    factory = RoundLaw.factory(config.rounds)
    for owner, (sd,) in _exact_distributions(config, [config.gamma]):
        mc = subset_distribution_mc(config.law, config.gamma, owner, MC_TRIALS, rng, factory)
        se = np.sqrt(sd.probs * (1 - sd.probs) / MC_TRIALS)
        off = np.abs(mc.probs - sd.probs) > MC_SIGMAS * np.maximum(se, 1.0 / MC_TRIALS)
        if np.any(off):
            return False, f"owner {owner}: subset(s) {np.flatnonzero(off).tolist()} disagree"
    return True, f"{MC_TRIALS} trials per owner, {MC_SIGMAS:g} standard errors"


@check("incomplete probability does not increase with gamma")
def _incomplete_monotone(config, rng):
    gammas = list(range(1, 13))
    for owner, sds in _exact_distributions(config, gammas):
        values = [incomplete_probability(sd) for sd in sds]
        if any(b > a + 1e-12 for a, b in zip(values, values[1:])):
            return False, f"owner {owner}"
    return True, "gamma = 1..12"


@check("distributed KL lies between the isolated and centralized KL")
def _kl_sandwich(config, rng):
    kls = config.model.kls()
    total = math.fsum(kls)
    gammas = [0.0, config.gamma, 4 * config.gamma] if config.rounds == "poisson" else [config.gamma]
    for owner, sds in _exact_distributions(config, gammas):
        for sd in sds:
            value = distributed_kl(sd, kls)
            if not kls[owner] - 1e-12 <= value <= total + 1e-12:
                return False, f"owner {owner}, gamma {sd.mean_rounds:g}: {value!r}"
    return True, ""


@check("finite-gamma envelopes bracket the incomplete probability")
def _envelopes(config, rng):
    gammas = [config.gamma, 2 * config.gamma, 4 * config.gamma]
    if config.rounds != "poisson":
        gammas = [config.gamma]
    factory = RoundLaw.factory(config.rounds)
    for owner, sds in _exact_distributions(config, gammas):
        bp = bound_params(config.a_bar, owner, DEFAULT_WINDOW)
        for sd in sds:
            lower, upper = window_envelope(bp, factory(sd.mean_rounds))
            incomplete = incomplete_probability(sd)
            if not lower * (1 - 1e-9) <= incomplete <= (config.node_count - 1) * upper * (1 + 1e-9):
                return False, f"owner {owner}, gamma {sd.mean_rounds:g}"
    return True, f"L={DEFAULT_WINDOW}"


@check("Gaussian KL closed forms match quadrature")
def _kl_quadrature(config, rng):
    worst = 0.0
    for i, sensor in enumerate(config.model.sensors):
        value, error = kl_number_with_error(sensor)
        if isinstance(sensor.post_change, Gaussian):
            worst = max(worst, abs(value - kl_number_quadrature(sensor)))
        elif error > TABULATED_KL_TOLERANCE * value:
            return False, f"sensor {i}: quadrature error estimate {error:.3g}"
    return worst <= ORACLE_TOLERANCE, f"largest difference {worst:.3g}"


def _random_llrs(config: ExperimentConfig, rng: np.random.Generator, periods: int) -> np.ndarray:
    change = int(rng.integers(1, periods + 1))
    post = np.arange(1, periods + 1) >= change
    return config.model.llr_matrix(config.model.sample_block(rng, post))


@check("recursion matches the batch statistic")
def _recursion_batch(config, rng):
    worst = 0.0
    detector = DetectorConfig(rho=config.rho, threshold=1.0)
    for _ in range(100):
        sums = [llr_sum(row, (1 << config.node_count) - 1) for row in _random_llrs(config, rng, 5)]
        state = DetectorState()
        for value in sums:
            state = step(state, detector, value)
        batch = batch_log_statistic(sums, config.rho)
        worst = max(worst, abs(state.log_lambda - batch) / max(1.0, abs(batch)))
    return worst <= ORACLE_TOLERANCE, f"largest relative error {worst:.3g}"


@check("decomposition reconstructs the statistic")
def _decomposition(config, rng):
    for _ in range(20):
        sums = [llr_sum(row, (1 << config.node_count) - 1) for row in _random_llrs(config, rng, 50)]
        steps = decompose(sums, config.rho)
        if any(b.l < a.l - 1e-12 for a, b in zip(steps, steps[1:])):
            return False, "the nonlinear term decreased"
    return True, "20 runs of 50 steps"


@check("distributed detector collapses to the isolated and centralized detectors")
def _mode_collapse(config, rng):
    n = config.node_count
    full = (1 << n) - 1
    for sensor in range(n):
        distributed = DetectorMode.distributed(sensor)
        for row in _random_llrs(config, rng, 10):
            if llr_sum(row, distributed.mask(n, 1 << sensor)) != llr_sum(
                row, DetectorMode.isolated(sensor).mask(n)
            ) or llr_sum(row, distributed.mask(n, full)) != llr_sum(
                row, DetectorMode.centralized().mask(n)
            ):
                return False, f"sensor {sensor}"
    return True, ""


def run_checks(config: ExperimentConfig, seed: Optional[int] = None) -> Iterator[CheckResult]:
    rng = np.random.default_rng(VALIDATION_SEED if seed is None else seed)
    for name, func in _CHECKS:
        try:
            passed, detail = func(config, rng)
        except SkipCheck as e:
            yield CheckResult(name=name, passed=True, detail=str(e), skipped=True)
            continue
        except GossipQCDError as e:
            passed, detail = False, f"{e.code}: {e!s}"
        if not passed:
            logger.error(f"Check failed: {name} ({detail})")
        else:
            logger.debug(f"Check passed: {name}")
        yield CheckResult(name=name, passed=passed, detail=detail)


def render_results(results: List[CheckResult], console: Console):
    table = Table(title="Invariant Checks")
    table.add_column("Check", justify="left", style="bold cyan")
    table.add_column("Result", justify="center")
    table.add_column("Detail", style="magenta")
    for result in results:
        if result.skipped:
            status = "[yellow]skipped[/yellow]"
        elif result.passed:
            status = "[green]passed[/green]"
        else:
            status = "[bold red]FAILED[/bold red]"
        table.add_row(result.name, status, result.detail)
    console.print(table)
