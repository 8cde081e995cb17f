"""
Shiryaev-type change detectors as log-domain recursions.

The centralized, isolated and distributed statistics share one recursion,

    log L_n = -log(1 - rho) + logaddexp(log L_{n-1}, log rho) + llr_sum_n,   log L_0 = -inf,

and differ only in which sensors' log-likelihood ratios make up llr_sum_n.
"""

import logging
import math
import sys
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import DetectorError, InvalidParameterError

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

logger = logging.getLogger(__name__)

IDENTITY_TOLERANCE = 1e-6


class NonFiniteError(DetectorError):
    code = "E_NON_FINITE"


class OutOfRangeError(DetectorError, ValueError):
    code = "E_OUT_OF_RANGE"


class IdentityViolationError(DetectorError):
    code = "E_IDENTITY_VIOLATION"


MODE_KINDS = ("centralized", "isolated", "distributed")


@dataclass(frozen=True)
class DetectorMode:
    kind: str
    sensor: Optional[int] = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise InvalidParameterError(
                f"Unknown detector mode {self.kind!r}; expected one of {', '.join(MODE_KINDS)}"
            )
        if self.kind == "centralized":
            if self.sensor is not None:
                raise InvalidParameterError("The centralized detector has no sensor")
        elif self.sensor is None or self.sensor < 0:
            raise InvalidParameterError(f"The {self.kind} detector needs a sensor index")

    @classmethod
    def parse(cls, text: str) -> Self:
        kind, _, sensor = text.strip().partition(":")
        if not sensor:
            return cls(kind)
        try:
            return cls(kind, int(sensor))
        except ValueError:
            raise InvalidParameterError(f"Invalid sensor index in detector mode {text!r}")

    @classmethod
    def centralized(cls) -> Self:
        return cls("centralized")

    @classmethod
    def isolated(cls, sensor: int) -> Self:
        return cls("isolated", sensor)

    @classmethod
    def distributed(cls, sensor: int) -> Self:
        return cls("distributed", sensor)

    @property
    def uses_gossip(self) -> bool:
        return self.kind == "distributed"

    def mask(self, node_count: int, reach: Optional[int] = None) -> int:
        """The set of sensors whose observations enter the statistic this period"""
        if self.sensor is not None and self.sensor >= node_count:
            raise InvalidParameterError(
                f"Sensor {self.sensor} is not one of the {node_count} sensors"
            )
        if self.kind == "centralized":
            return (1 << node_count) - 1
        elif self.kind == "isolated":
            return 1 << self.sensor  # type: ignore
        if reach is None:
            raise InvalidParameterError("The distributed detector needs this period's reach set")
        return reach

    def __str__(self):
        if self.sensor is None:
            return self.kind
        return f"{self.kind}:{self.sensor}"


def llr_sum(llrs: Sequence[float], mask: int) -> float:
    """Sums the per-sensor log-likelihood ratios of the sensors in `mask`; the result does not
    depend on the order of the terms"""
    terms = []
    i = 0
    while mask:
        if mask & 1:
            terms.append(float(llrs[i]))
        mask >>= 1
        i += 1
    return math.fsum(terms)


@dataclass(frozen=True)
class DetectorConfig:
    rho: float
    threshold: float
    mode: DetectorMode = DetectorMode("centralized")

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise InvalidParameterError(f"rho must lie strictly inside (0, 1), not {self.rho!r}")
        if not self.threshold >= 0 or math.isnan(self.threshold):
            raise InvalidParameterError(f"The threshold must be non-negative, not {self.threshold!r}")

    @property
    def log_rho(self) -> float:
        return math.log(self.rho)

    @property
    def log_odds_step(self) -> float:
        """|log(1 - rho)|"""
        return -math.log1p(-self.rho)

    @property
    def log_threshold(self) -> float:
        if self.threshold == 0:
            return -math.inf
        return math.log(self.threshold)


@dataclass(frozen=True)
class DetectorState:
    log_lambda: float = -math.inf
    step: int = 0

    def __post_init__(self):
        if math.isnan(self.log_lambda):
            raise NonFiniteError(f"The statistic became NaN at step {self.step}")
        if self.step == 0 and self.log_lambda != -math.inf:
            raise InvalidParameterError("The statistic starts at zero")
        if self.step > 0 and not math.isfinite(self.log_lambda):
            raise NonFiniteError(
                f"The statistic is {self.log_lambda!r} at step {self.step}; it must stay finite"
            )

    @property
    def value(self) -> float:
        return math.exp(self.log_lambda)


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def advance(log_lambda: float, llr: float, log_rho: float, log_odds_step: float) -> float:
    """One step of the recursion on plain floats"""
    return log_odds_step + _logaddexp(log_lambda, log_rho) + llr


def step(state: DetectorState, config: DetectorConfig, llr_sum: float) -> DetectorState:
    if not math.isfinite(llr_sum):
        raise NonFiniteError(f"The log-likelihood ratio sum {llr_sum!r} is not finite")
    return DetectorState(
        log_lambda=advance(state.log_lambda, llr_sum, config.log_rho, config.log_odds_step),
        step=state.step + 1,
    )


def has_stopped(state: DetectorState, config: DetectorConfig) -> bool:
    return state.log_lambda >= config.log_threshold


def threshold_from_pfa(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise OutOfRangeError(f"The target false-alarm probability must lie in (0, 1), not {alpha!r}")
    return (1.0 - alpha) / alpha


def pfa_bound(threshold: float) -> float:
    """The false-alarm guarantee 1 / (1 + A) of threshold A"""
    return 1.0 / (1.0 + threshold)


def posterior(state: DetectorState) -> float:
    """p_n = L_n / (1 + L_n), the posterior probability that the change has occurred"""
    return float(expit(state.log_lambda))


def run(llr_sums: Iterable[float], config: DetectorConfig) -> Iterator[DetectorState]:
    state = DetectorState()
    for value in llr_sums:
        state = step(state, config, value)
        yield state


def stopping_time(llr_sums: Iterable[float], config: DetectorConfig) -> Optional[int]:
    """The first step at which the statistic reaches the threshold, or None"""
    for state in run(llr_sums, config):
        if has_stopped(state, config):
            return state.step
    return None


def batch_log_statistic(llrs: Sequence[float], rho: float) -> float:
    """
    log L_n evaluated directly as the prior-weighted sum over every possible change time:

        L_n = (1 - rho)^-n * sum_{k=1..n} rho (1 - rho)^(k-1) prod_{j=k..n} exp(llr_j)
    """
    llrs = np.asarray(llrs, dtype=float)
    n = len(llrs)
    if n == 0:
        return -math.inf
    if not 0 < rho < 1:
        raise InvalidParameterError(f"rho must lie strictly inside (0, 1), not {rho!r}")
    log_survive = math.log1p(-rho)
    # suffix[k - 1] = sum_{j=k..n} llr_j
    suffix = np.cumsum(llrs[::-1])[::-1]
    k = np.arange(1, n + 1)
    terms = math.log(rho) + (k - 1) * log_survive + suffix
    return float(-n * log_survive + logsumexp(terms))


@dataclass(frozen=True)
class Decomposition:
    step: int
    z: float
    """Z_n, the running sum of log(f_1 / f_0) terms"""
    w: float
    """W_n = Z_n + n |log(1 - rho)|"""
    l: float  # noqa: E741
    """the nonlinear term l_n >= 0"""
    log_lambda: float


def decompose(llr_sums: Iterable[float], rho: float) -> List[Decomposition]:
    """
    Splits the statistic into log rho + W_n + l_n, where W_n is a random walk and

        l_n = log(1 + sum_{k=1..n-1} (1 - rho)^k exp(-Z_k)),

    and checks the reconstruction against the recursion at every step.
    """
    config = DetectorConfig(rho=rho, threshold=1.0)
    log_survive = math.log1p(-rho)
    z = 0.0
    log_tail = -math.inf
    log_lambda = -math.inf
    result: List[Decomposition] = []
    for n, value in enumerate(llr_sums, start=1):
        if not math.isfinite(value):
            raise NonFiniteError(f"The log-likelihood ratio sum {value!r} is not finite")
        if n > 1:
            log_tail = _logaddexp(log_tail, (n - 1) * log_survive - z)
        z += value
        w = z + n * config.log_odds_step
        nonlinear = _logaddexp(0.0, log_tail)
        log_lambda = advance(log_lambda, value, config.log_rho, config.log_odds_step)
        reconstructed = config.log_rho + w + nonlinear
        if abs(reconstructed - log_lambda) > IDENTITY_TOLERANCE * max(1.0, abs(log_lambda)):
            raise IdentityViolationError(
                f"log rho + W_n + l_n = {reconstructed!r} but the recursion gives "
                f"{log_lambda!r} at step {n}"
            )
        result.append(Decomposition(step=n, z=z, w=w, l=nonlinear, log_lambda=log_lambda))
    return result
