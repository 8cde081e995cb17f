"""
Monte Carlo trials and the estimators built on them: false-alarm probability, detection
delay, first-layer decay-rate fits, the second-layer decay curve and the distributed KL sweep.
"""

import logging
import math
from concurrent.futures import Executor, ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import statsmodels.api as sm
from rich.console import Console

from .detector import DetectorConfig, DetectorMode, advance, llr_sum
from .exceptions import ExperimentError, InvalidParameterError
from .gossip import (
    EXACT_SUBSET_MAX_NODES,
    incomplete_probability,
    inclusion_probabilities,
    inclusion_probabilities_exact,
    sample_reach_masks,
    subset_distribution_mc,
    subset_distributions_exact,
)
from .logs import get_console, trial_progress
from .markov import (
    DEFAULT_WINDOW,
    DegenerateBoundError,
    bound_params,
    taboo_spectral_radius,
    window_envelope,
)
from .obsmodel import ObservationModel, distributed_kl, kl_bounds_thm4, kl_envelope
from .rounds import DEFAULT_TAIL_EPS, RoundLaw
from .topology import (
    AveragedMatrix,
    Graph,
    MatchingDistribution,
    MatchingLaw,
    averaged_matrix,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(float(10 ** (1 + k / 2)) for k in range(7))
OBSERVATION_BLOCK = 32
CHUNK_SIZE = 1000
PRIOR_STREAM = 0
FORCED_STREAM = 1
MIN_FIT_POINTS = 3
MIN_CADD_SPREAD = 1.0
DEFAULT_MC_TRIALS = 100_000


class MissingSeedError(ExperimentError):
    code = "E_MISSING_SEED"


class ZeroFalseAlarmsError(ExperimentError):
    code = "E_ZERO_FALSE_ALARMS"


class DegenerateFitError(ExperimentError):
    code = "E_DEGENERATE_FIT"


class NotAnalyzableError(ExperimentError):
    code = "E_NOT_ANALYZABLE"


@dataclass(frozen=True)
class ExperimentConfig:
    graph: Graph
    law: MatchingLaw
    model: ObservationModel
    distribution: str = "uniform_enumerated"
    rho: float = 0.1
    gamma: float = 6.0
    rounds: str = "poisson"
    mode: DetectorMode = DetectorMode("centralized")
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    trials_per_threshold: int = 100_000
    max_horizon: int = 2000
    max_horizon_limit: int = 64_000
    censor_cap: float = 0.001
    master_seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(a) for a in self.thresholds))
        if self.model.node_count != self.graph.node_count:
            raise InvalidParameterError(
                f"The observation model has {self.model.node_count} sensors but the network "
                f"has {self.graph.node_count} nodes"
            )
        if not 0 < self.rho < 1:
            raise InvalidParameterError(f"rho must lie strictly inside (0, 1), not {self.rho!r}")
        if any(a <= 0 for a in self.thresholds):
            raise InvalidParameterError("Thresholds must be positive")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise InvalidParameterError("Thresholds must be strictly increasing")
        if self.trials_per_threshold < 1:
            raise InvalidParameterError("At least one trial per threshold is required")
        if not 1 <= self.max_horizon <= self.max_horizon_limit:
            raise InvalidParameterError("max_horizon must be at least 1 and at most max_horizon_limit")
        if not 0 <= self.censor_cap < 1:
            raise InvalidParameterError("censor_cap must lie in [0, 1)")
        if self.mode.sensor is not None and self.mode.sensor >= self.graph.node_count:
            raise InvalidParameterError(
                f"Detector mode {self.mode} names a sensor outside of the network"
            )
        RoundLaw.factory(self.rounds)(self.gamma)

    @property
    def node_count(self) -> int:
        return self.graph.node_count

    @property
    def round_law(self) -> RoundLaw:
        return RoundLaw.factory(self.rounds)(self.gamma)

    @property
    def a_bar(self) -> AveragedMatrix:
        if not isinstance(self.law, MatchingDistribution):
            raise NotAnalyzableError(
                "The averaged matrix needs an enumerated matching distribution"
            )
        return averaged_matrix(self.law)

    def require_seed(self) -> int:
        if self.master_seed is None:
            raise MissingSeedError(
                "No master seed was given; set `master_seed` in the config or pass --seed"
            )
        return self.master_seed

    def with_changes(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        network: Dict[str, Any] = {
            "nodes": self.graph.node_count,
            "edges": [list(e) for e in self.graph.sorted_edges()],
        }
        if self.distribution == "explicit":
            assert isinstance(self.law, MatchingDistribution)
            network["distribution"] = {
                "explicit": [
                    {"partner": list(m.partner), "weight": w} for m, w in self.law.entries
                ]
            }
        else:
            network["distribution"] = self.distribution
        return {
            "master_seed": self.master_seed,
            "rho": self.rho,
            "gamma": self.gamma,
            "rounds": self.rounds,
            "mode": str(self.mode),
            "thresholds": list(self.thresholds),
            "trials_per_threshold": self.trials_per_threshold,
            "max_horizon": self.max_horizon,
            "max_horizon_limit": self.max_horizon_limit,
            "censor_cap": self.censor_cap,
            "network": network,
            "sensors": [s.to_dict() for s in self.model.sensors],
        }


@dataclass(frozen=True)
class TrialOutcome:
    change_time: int
    stop_time: Optional[int]
    """None when the statistic never reached the threshold within the horizon"""

    @property
    def censored(self) -> bool:
        return self.stop_time is None

    @property
    def false_alarm(self) -> bool:
        return self.stop_time is not None and self.stop_time < self.change_time

    @property
    def delay(self) -> Optional[int]:
        if self.stop_time is None or self.stop_time < self.change_time:
            return None
        return self.stop_time - self.change_time


def trial_rng(master_seed: int, stream: int, threshold_index: int, trial_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, stream, threshold_index, trial_index])
    )


def run_trial(
    config: ExperimentConfig,
    threshold: float,
    forced_change_time: Optional[int],
    rng: np.random.Generator,
    horizon: Optional[int] = None,
) -> TrialOutcome:
    """
    Simulates one change-detection run. Observations (and, for the distributed detector, gossip
    periods) are generated in fixed-size blocks, so a longer horizon replays the same prefix.
    """
    if horizon is None:
        horizon = config.max_horizon
    detector = DetectorConfig(rho=config.rho, threshold=threshold, mode=config.mode)
    if forced_change_time is None:
        change_time = int(rng.geometric(config.rho))
    else:
        if forced_change_time < 1:
            raise InvalidParameterError("The change time must be at least 1")
        change_time = forced_change_time
    n = config.node_count
    mode = config.mode
    fixed_mask = None if mode.uses_gossip else mode.mask(n)
    log_rho, log_odds_step, log_threshold = (
        detector.log_rho,
        detector.log_odds_step,
        detector.log_threshold,
    )
    round_law = config.round_law if mode.uses_gossip else None
    log_lambda = -math.inf
    start = 1
    while start <= horizon:
        periods = np.arange(start, start + OBSERVATION_BLOCK)
        llrs = config.model.llr_matrix(config.model.sample_block(rng, periods >= change_time))
        reach = None
        if round_law is not None:
            reach = sample_reach_masks(config.law, round_law, OBSERVATION_BLOCK, rng)[:, mode.sensor]
        for offset in range(min(OBSERVATION_BLOCK, horizon - start + 1)):
            mask = fixed_mask if reach is None else int(reach[offset])
            total = llr_sum(llrs[offset], mask)  # type: ignore
            if not math.isfinite(total):
                raise ExperimentError(f"A non-finite log-likelihood ratio sum {total!r} was drawn")
            log_lambda = advance(log_lambda, total, log_rho, log_odds_step)
            if log_lambda >= log_threshold:
                return TrialOutcome(change_time=change_time, stop_time=start + offset)
        start += OBSERVATION_BLOCK
    return TrialOutcome(change_time=change_time, stop_time=None)


def _simulate_chunk(
    config: ExperimentConfig,
    threshold_index: int,
    stream: int,
    indices: Sequence[int],
    horizon: int,
) -> np.ndarray:
    """Returns one (change time, stop time or -1) row per trial index"""
    seed = config.require_seed()
    threshold = config.thresholds[threshold_index]
    forced = 1 if stream == FORCED_STREAM else None
    rows = np.empty((len(indices), 2), dtype=np.int64)
    for row, index in enumerate(indices):
        outcome = run_trial(
            config, threshold, forced, trial_rng(seed, stream, threshold_index, index), horizon
        )
        rows[row] = (
            outcome.change_time,
            -1 if outcome.stop_time is None else outcome.stop_time,
        )
    return rows


@dataclass
class _TrialBatch:
    change: np.ndarray
    stop: np.ndarray
    horizon: int

    @property
    def censored(self) -> np.ndarray:
        return self.stop < 0


class TrialRunner:
    """Runs trials inline or on a process pool; results never depend on the worker count"""

    def __init__(
        self,
        config: ExperimentConfig,
        workers: int = 1,
        console: Optional[Console] = None,
    ):
        config.require_seed()
        if workers < 1:
            raise InvalidParameterError(f"At least one worker is required, not {workers}")
        self.config = config
        self.workers = workers
        self.console = console if console is not None else get_console(logger)
        self._executor: Optional[Executor] = None

    def __enter__(self):
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self._executor is not None:
            self._executor.shutdown(cancel_futures=True)
            self._executor = None

    def simulate(
        self, threshold_index: int, stream: int, indices: np.ndarray, horizon: int, description: str
    ) -> np.ndarray:
        chunks = [indices[i : i + CHUNK_SIZE] for i in range(0, len(indices), CHUNK_SIZE)]
        results: List[Optional[np.ndarray]] = [None] * len(chunks)
        with trial_progress(self.console) as progress:
            task = progress.add_task(description, total=len(indices))
            if self._executor is None:
                for c, chunk in enumerate(chunks):
                    results[c] = _simulate_chunk(
                        self.config, threshold_index, stream, chunk.tolist(), horizon
                    )
                    progress.update(task, advance=len(chunk))
            else:
                futures = {
                    self._executor.submit(
                        _simulate_chunk,
                        self.config,
                        threshold_index,
                        stream,
                        chunk.tolist(),
                        horizon,
                    ): c
                    for c, chunk in enumerate(chunks)
                }
                for future in as_completed(futures):
                    c = futures[future]
                    results[c] = future.result()
                    progress.update(task, advance=len(chunks[c]))
        if not results:
            return np.empty((0, 2), dtype=np.int64)
        return np.concatenate(results)  # type: ignore

    def run_stream(self, threshold_index: int, stream: int) -> _TrialBatch:
        """Runs every trial of one stream, doubling the horizon for censored trials while the
        censored fraction exceeds the cap"""
        config = self.config
        trials = config.trials_per_threshold
        horizon = config.max_horizon
        label = "PFA" if stream == PRIOR_STREAM else "CADD"
        threshold = config.thresholds[threshold_index]
        rows = self.simulate(
            threshold_index,
            stream,
            np.arange(trials),
            horizon,
            f"{config.mode} {label} A={threshold:.4g}",
        )
        change, stop = rows[:, 0].copy(), rows[:, 1].copy()
        while True:
            censored = np.flatnonzero(stop < 0)
            if len(censored) <= config.censor_cap * trials:
                break
            if horizon >= config.max_horizon_limit:
                logger.warning(
                    f"{len(censored)} of {trials} {label} trials at A={threshold:.4g} are still "
                    f"censored at the horizon limit {horizon}; they are excluded from the estimates"
                )
                break
            horizon = min(2 * horizon, config.max_horizon_limit)
            logger.info(
                f"{len(censored)} {label} trials at A={threshold:.4g} were censored; rerunning "
                f"them with a horizon of {horizon} periods"
            )
            rerun = self.simulate(
                threshold_index,
                stream,
                censored,
                horizon,
                f"{config.mode} {label} A={threshold:.4g} (horizon {horizon})",
            )
            change[censored], stop[censored] = rerun[:, 0], rerun[:, 1]
        return _TrialBatch(change=change, stop=stop, horizon=horizon)


@dataclass(frozen=True)
class RatePoint:
    threshold: float
    cadd1: float
    cadd1_se: float
    pfa: float
    pfa_se: float
    log_pfa: Optional[float]
    log_pfa_se: Optional[float]
    pfa_trials: int
    cadd_trials: int
    false_alarms: int
    add: float
    add_se: float
    censored: int
    horizon: int

    @property
    def fittable(self) -> bool:
        return self.log_pfa is not None


def _mean_and_se(values: np.ndarray) -> Tuple[float, float]:
    if len(values) == 0:
        return math.nan, math.nan
    mean = float(np.mean(values))
    if len(values) < 2:
        return mean, math.nan
    return mean, float(np.std(values, ddof=1) / math.sqrt(len(values)))


def rate_point(threshold: float, prior: _TrialBatch, forced: _TrialBatch) -> RatePoint:
    kept = ~prior.censored
    change, stop = prior.change[kept], prior.stop[kept]
    n_pfa = len(stop)
    alarms = int(np.count_nonzero(stop < change))
    pfa = alarms / n_pfa if n_pfa else math.nan
    pfa_se = math.sqrt(pfa * (1 - pfa) / n_pfa) if n_pfa else math.nan
    if alarms:
        log_pfa: Optional[float] = math.log(pfa)
        log_pfa_se: Optional[float] = pfa_se / pfa
    else:
        log_pfa = log_pfa_se = None
    detected = stop >= change
    add, add_se = _mean_and_se((stop - change)[detected])
    delays = forced.stop[~forced.censored] - 1
    cadd1, cadd1_se = _mean_and_se(delays)
    return RatePoint(
        threshold=threshold,
        cadd1=cadd1,
        cadd1_se=cadd1_se,
        pfa=pfa,
        pfa_se=pfa_se,
        log_pfa=log_pfa,
        log_pfa_se=log_pfa_se,
        pfa_trials=n_pfa,
        cadd_trials=len(delays),
        false_alarms=alarms,
        add=add,
        add_se=add_se,
        censored=int(np.count_nonzero(prior.censored) + np.count_nonzero(forced.censored)),
        horizon=max(prior.horizon, forced.horizon),
    )


def estimate_pfa_cadd(
    config: ExperimentConfig,
    workers: int = 1,
    console: Optional[Console] = None,
    drop_zero_alarms: bool = True,
) -> List[RatePoint]:
    """
    Estimates PFA from trials whose change time is drawn from the geometric prior and CADD_1
    from trials whose change happens in the first period, for every configured threshold
    """
    points: List[RatePoint] = []
    with TrialRunner(config, workers=workers, console=console) as runner:
        for t, threshold in enumerate(config.thresholds):
            prior = runner.run_stream(t, PRIOR_STREAM)
            forced = runner.run_stream(t, FORCED_STREAM)
            point = rate_point(threshold, prior, forced)
            if not point.fittable:
                message = (
                    f"No false alarm in {point.pfa_trials} trials at A={threshold:.4g}; "
                    "ln PFA is undefined there"
                )
                if not drop_zero_alarms:
                    raise ZeroFalseAlarmsError(message)
                logger.warning(f"{message}, so the point is left out of the decay fit")
            logger.debug(
                f"{config.mode} A={threshold:.4g}: PFA={point.pfa:.4g} CADD_1={point.cadd1:.4g}"
            )
            points.append(point)
    return points


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float
    r_squared: float
    points: int


def fit_decay_rate(points: Sequence[RatePoint]) -> DecayFit:
    """Weighted least squares of ln PFA on CADD_1, weighted by the inverse variance of ln PFA"""
    usable = [p for p in points if p.fittable and math.isfinite(p.cadd1)]
    if len(usable) < MIN_FIT_POINTS:
        raise DegenerateFitError(
            f"A decay fit needs at least {MIN_FIT_POINTS} points with false alarms, got {len(usable)}"
        )
    x = np.array([p.cadd1 for p in usable])
    if np.ptp(x) < MIN_CADD_SPREAD:
        raise DegenerateFitError(
            f"The CADD_1 values span only {np.ptp(x):.3g} periods; at least "
            f"{MIN_CADD_SPREAD} is required"
        )
    y = np.array([p.log_pfa for p in usable], dtype=float)
    variances = np.array([p.log_pfa_se for p in usable], dtype=float) ** 2
    positive = variances[np.isfinite(variances) & (variances > 0)]
    floor = positive.min() if len(positive) else 1.0
    variances = np.where(np.isfinite(variances) & (variances > 0), variances, floor)
    results = sm.WLS(y, sm.add_constant(x), weights=1.0 / variances).fit()
    intercept, slope = (float(v) for v in results.params)
    intercept_se, slope_se = (float(v) for v in results.bse)
    return DecayFit(
        slope=slope,
        intercept=intercept,
        slope_stderr=slope_se,
        intercept_stderr=intercept_se,
        r_squared=float(results.rsquared),
        points=len(usable),
    )


def target_rate(kl: float, rho: float) -> float:
    """The first-layer decay rate -(KL + |log(1 - rho)|)"""
    return -(kl - math.log1p(-rho))


def distributed_kl_number(
    config: ExperimentConfig,
    owner: int,
    gamma: Optional[float] = None,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> float:
    """The distributed KL number of `owner`: exact for enumerated laws, Monte Carlo otherwise"""
    if gamma is None:
        gamma = config.gamma
    kls = config.model.kls()
    if isinstance(config.law, MatchingDistribution):
        inclusion = inclusion_probabilities_exact(
            config.a_bar, owner, RoundLaw.factory(config.rounds)(gamma), tail_eps
        )
    else:
        sd = subset_distribution_mc(
            config.law,
            gamma,
            owner,
            DEFAULT_MC_TRIALS,
            np.random.default_rng(np.random.SeedSequence([config.require_seed(), 2, owner])),
            RoundLaw.factory(config.rounds),
        )
        inclusion = inclusion_probabilities(sd)
    return math.fsum(inclusion * kls)


def mode_target_rate(config: ExperimentConfig) -> float:
    mode = config.mode
    kls = config.model.kls()
    if mode.kind == "centralized":
        kl = math.fsum(kls)
    elif mode.kind == "isolated":
        kl = float(kls[mode.sensor])
    else:
        kl = distributed_kl_number(config, mode.sensor)  # type: ignore
    return target_rate(kl, config.rho)


@dataclass(frozen=True)
class SecondLayerRow:
    gamma: float
    owner: int
    incomplete: float
    rate: float
    lower_rate: float
    upper_rate: float
    envelope_lower: float
    envelope_upper: float
    limit_rate: float
    method: str
    stderr: Optional[float] = None


def _limit_rate(config: ExperimentConfig, owner: int) -> float:
    """The exact decay rate of the incomplete probability as gamma grows"""
    radius = taboo_spectral_radius(config.a_bar, owner)
    if config.rounds == "poisson":
        return radius - 1.0
    return math.log(radius) if radius > 0 else -math.inf


def _check_gammas(gammas: Sequence[float], allow_zero: bool):
    if not gammas:
        raise InvalidParameterError("The gamma grid is empty")
    if any(g < 0 or (g == 0 and not allow_zero) for g in gammas):
        raise InvalidParameterError("Gamma values must be positive")
    if any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise InvalidParameterError("The gamma grid must be increasing")


def _safe_log(value: float) -> float:
    return math.log(value) if value > 0 else -math.inf


def second_layer_curve(
    config: ExperimentConfig,
    gammas: Sequence[float],
    owner: int = 0,
    window: int = DEFAULT_WINDOW,
    method: str = "exact",
    trials: int = DEFAULT_MC_TRIALS,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> List[SecondLayerRow]:
    """
    Per gamma: (1/gamma) ln P(not every observation reaches `owner`), next to the asymptotic
    bound lines ln(beta)/L and ln(alpha)/L and the finite-gamma envelope in the same units
    """
    gammas = [float(g) for g in gammas]
    _check_gammas(gammas, allow_zero=False)
    if method not in ("exact", "mc"):
        raise InvalidParameterError(f"Unknown method {method!r}; expected exact or mc")
    if not isinstance(config.law, MatchingDistribution):
        raise NotAnalyzableError(
            "The second-layer curve needs an enumerated matching distribution for its bound "
            f"lines, but the config uses the {config.distribution!r} sampler; Monte Carlo "
            "subset estimates alone are available through `gossip-stats --method mc`"
        )
    if method == "exact" and config.node_count > EXACT_SUBSET_MAX_NODES:
        logger.warning(
            f"The {config.node_count}-node network is too large for the exact subset "
            "distribution; falling back to Monte Carlo"
        )
        method = "mc"
    factory = RoundLaw.factory(config.rounds)
    bp = bound_params(config.a_bar, owner, window)
    limit = _limit_rate(config, owner)
    if method == "exact":
        distributions = subset_distributions_exact(config.law, gammas, owner, tail_eps, factory)
    else:
        seed = config.require_seed()
        distributions = [
            subset_distribution_mc(
                config.law,
                gamma,
                owner,
                trials,
                np.random.default_rng(np.random.SeedSequence([seed, 3, owner, g])),
                factory,
            )
            for g, gamma in enumerate(gammas)
        ]
    rows = []
    for gamma, sd in zip(gammas, distributions):
        incomplete = incomplete_probability(sd)
        lower_factor, upper_factor = window_envelope(bp, factory(gamma), tail_eps)
        stderr = None
        if sd.trials:
            stderr = math.sqrt(incomplete * (1 - incomplete) / sd.trials)
        rows.append(
            SecondLayerRow(
                gamma=gamma,
                owner=owner,
                incomplete=incomplete,
                rate=_safe_log(incomplete) / gamma,
                lower_rate=bp.lower_rate,
                upper_rate=bp.upper_rate,
                envelope_lower=_safe_log(lower_factor) / gamma,
                envelope_upper=_safe_log((config.node_count - 1) * upper_factor) / gamma,
                limit_rate=limit,
                method=sd.method,
                stderr=stderr,
            )
        )
    return rows


@dataclass(frozen=True)
class KLSweepRow:
    gamma: float
    owner: int
    exact_dkl: float
    thm4_lower: Optional[float]
    thm4_upper: Optional[float]
    centralized_kl: float
    thm4_holds: bool
    envelope_lower: float
    envelope_upper: float
    gap_bound: float
    """max_j D_j exp(gamma ln(alpha) / L), the asymptotic bound on the KL gap"""


def kl_convergence_sweep(
    config: ExperimentConfig,
    gammas: Sequence[float],
    owner: int = 0,
    window: int = DEFAULT_WINDOW,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> List[KLSweepRow]:
    """Per gamma: the exact distributed KL number of `owner` with its bounds"""
    gammas = [float(g) for g in gammas]
    _check_gammas(gammas, allow_zero=True)
    factory = RoundLaw.factory(config.rounds)
    kls = config.model.kls()
    total = math.fsum(kls)
    a_bar = config.a_bar
    bp = bound_params(a_bar, owner, window)
    if config.node_count <= EXACT_SUBSET_MAX_NODES:
        exact = [
            distributed_kl(sd, kls)
            for sd in subset_distributions_exact(config.law, gammas, owner, tail_eps, factory)
        ]
    else:
        exact = [
            math.fsum(inclusion_probabilities_exact(a_bar, owner, factory(g), tail_eps) * kls)
            for g in gammas
        ]
    others_max = float(np.delete(kls, owner).max())
    rows = []
    first_holding: Optional[float] = None
    for gamma, dkl in zip(gammas, exact):
        try:
            lower, upper = kl_bounds_thm4(kls, owner, bp, gamma)
            holds = lower <= dkl <= upper
        except DegenerateBoundError:
            lower = upper = None
            holds = False
        if holds and first_holding is None:
            first_holding = gamma
        elif not holds:
            first_holding = None
        env_lower, env_upper = kl_envelope(kls, owner, window_envelope(bp, factory(gamma), tail_eps))
        rows.append(
            KLSweepRow(
                gamma=gamma,
                owner=owner,
                exact_dkl=dkl,
                thm4_lower=lower,
                thm4_upper=upper,
                centralized_kl=total,
                thm4_holds=holds,
                envelope_lower=env_lower,
                envelope_upper=env_upper,
                gap_bound=others_max * math.exp(gamma * bp.upper_rate),
            )
        )
    if first_holding is None:
        logger.info(f"The asymptotic KL bounds do not hold at the end of the gamma grid for sensor {owner}")
    else:
        logger.info(f"The asymptotic KL bounds hold for sensor {owner} from gamma={first_holding:g} on the grid")
    return rows


@dataclass(frozen=True)
class FirstLayerResult:
    mode: DetectorMode
    points: List[RatePoint] = field(default_factory=list)
    fit: Optional[DecayFit] = None
    target: float = math.nan


def all_modes(node_count: int) -> List[DetectorMode]:
    return (
        [DetectorMode.centralized()]
        + [DetectorMode.isolated(i) for i in range(node_count)]
        + [DetectorMode.distributed(i) for i in range(node_count)]
    )


def run_first_layer(
    config: ExperimentConfig,
    modes: Sequence[DetectorMode],
    workers: int = 1,
    console: Optional[Console] = None,
) -> List[FirstLayerResult]:
    results = []
    for mode in modes:
        mode_config = config.with_changes(mode=mode)
        points = estimate_pfa_cadd(mode_config, workers=workers, console=console)
        try:
            fit: Optional[DecayFit] = fit_decay_rate(points)
        except DegenerateFitError as e:
            logger.warning(f"Could not fit a decay rate for {mode}: {e!s}")
            fit = None
        target = mode_target_rate(mode_config)
        if fit is not None:
            logger.info(
                f"{mode}: fitted slope {fit.slope:.5f} ± {fit.slope_stderr:.5f}, "
                f"target {target:.5f}"
            )
        results.append(FirstLayerResult(mode=mode, points=points, fit=fit, target=target))
    return results


def rate_ordering_violations(results: Sequence[FirstLayerResult], sigmas: float = 2.0) -> List[str]:
    """
    Checks |isolated_i| <= |distributed_i| <= |centralized| for every sensor with both fits,
    allowing `sigmas` combined standard errors of slack
    """
    fits: Dict[Tuple[str, Optional[int]], DecayFit] = {
        (r.mode.kind, r.mode.sensor): r.fit for r in results if r.fit is not None
    }
    violations = []
    centralized = fits.get(("centralized", None))
    sensors = sorted({s for _, s in fits if s is not None})
    for sensor in sensors:
        chain = [
            (name, fits.get(key))
            for name, key in (
                (f"isolated:{sensor}", ("isolated", sensor)),
                (f"distributed:{sensor}", ("distributed", sensor)),
                ("centralized", ("centralized", None)),
            )
        ]
        present = [(name, fit) for name, fit in chain if fit is not None]
        for (weak_name, weak), (strong_name, strong) in zip(present, present[1:]):
            slack = sigmas * math.hypot(weak.slope_stderr, strong.slope_stderr)
            if abs(weak.slope) > abs(strong.slope) + slack:
                violations.append(
                    f"|{weak_name}| = {abs(weak.slope):.5f} exceeds |{strong_name}| = "
                    f"{abs(strong.slope):.5f} by more than {slack:.5f}"
                )
    if centralized is None and sensors:
        logger.debug("No centralized fit; only the isolated/distributed order was checked")
    return violations
