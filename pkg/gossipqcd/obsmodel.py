"""
Observation densities, log-likelihood ratios and Kullback-Leibler information numbers.

All likelihood arithmetic is in nats and stays in the log domain.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from inspect import isabstract
from typing import Any, Dict, Mapping, Sequence, Tuple, Type, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad, trapezoid
from scipy.special import ndtr

from .exceptions import InvalidParameterError, ModelError
from .gossip import SubsetDistribution
from .markov import BoundParams, DegenerateBoundError

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
NORMALIZATION_TOLERANCE = 1e-6
GRID_SPACING_TOLERANCE = 1e-9
SANDWICH_TOLERANCE = 1e-12

ArrayLike = Union[float, np.ndarray]


class NondistinguishablePairError(ModelError):
    code = "E_NONDISTINGUISHABLE"


class OutOfSupportError(ModelError):
    code = "E_OUT_OF_SUPPORT"


class InvalidDensityError(ModelError):
    code = "E_INVALID_DENSITY"


class Density(ABC):
    DENSITIES_BY_KIND: Dict[str, Type["Density"]]
    KIND: str

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if not isabstract(cls):
            if not hasattr(Density, "DENSITIES_BY_KIND"):
                Density.DENSITIES_BY_KIND = {}
            if not getattr(cls, "KIND", None):
                raise TypeError(f"{cls.__name__} must define a KIND attribute")
            elif cls.KIND in Density.DENSITIES_BY_KIND:
                raise TypeError(
                    f"Density {cls.__name__} cannot have kind {cls.KIND} because that kind is "
                    f"already assigned to {Density.DENSITIES_BY_KIND[cls.KIND]}"
                )
            Density.DENSITIES_BY_KIND[cls.KIND] = cls

    @classmethod
    def from_dict(cls, spec: Mapping[str, Any]) -> "Density":
        kind = spec.get("kind")
        if kind not in cls.DENSITIES_BY_KIND:
            raise InvalidDensityError(
                f"Unknown density kind {kind!r}; expected one of "
                f"{', '.join(sorted(cls.DENSITIES_BY_KIND))}"
            )
        params = {k: v for k, v in spec.items() if k != "kind"}
        try:
            return cls.DENSITIES_BY_KIND[kind](**params)
        except TypeError as e:
            raise InvalidDensityError(f"Invalid parameters for a {kind} density: {e!s}")

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError()

    @abstractmethod
    def log_pdf(self, x: ArrayLike) -> ArrayLike:
        raise NotImplementedError()

    @abstractmethod
    def from_standard_normal(self, z: np.ndarray) -> np.ndarray:
        """Maps standard normal variates to variates of this density"""
        raise NotImplementedError()

    def sample(self, rng: np.random.Generator, size=None) -> ArrayLike:
        return self.from_standard_normal(rng.standard_normal(size))


@dataclass(frozen=True)
class Gaussian(Density):
    KIND = "gaussian"

    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise InvalidDensityError("Gaussian parameters must be finite")
        if self.variance <= 0:
            raise InvalidDensityError(f"Gaussian variance must be positive, not {self.variance!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.KIND, "mean": self.mean, "variance": self.variance}

    def log_pdf(self, x: ArrayLike) -> ArrayLike:
        x = np.asarray(x, dtype=float)
        return -0.5 * (
            np.log(2 * np.pi * self.variance) + (x - self.mean) ** 2 / self.variance
        )

    def from_standard_normal(self, z: np.ndarray) -> np.ndarray:
        return self.mean + math.sqrt(self.variance) * np.asarray(z)


@dataclass(frozen=True, eq=False)
class Tabulated(Density):
    """A density given by its logarithm on a uniform grid, log-linearly interpolated between
    grid points and zero outside of the grid"""

    KIND = "tabulated"

    grid: np.ndarray
    log_density: np.ndarray
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        log_density = np.asarray(self.log_density, dtype=float)
        if grid.ndim != 1 or len(grid) < 3 or grid.shape != log_density.shape:
            raise InvalidDensityError(
                "A tabulated density needs matching grid and log-density vectors of at least "
                "three points"
            )
        steps = np.diff(grid)
        if np.any(steps <= 0) or np.ptp(steps) > GRID_SPACING_TOLERANCE * steps[0] * len(steps):
            raise InvalidDensityError("The grid of a tabulated density must be uniform and increasing")
        if np.any(np.isnan(log_density)) or np.any(log_density == np.inf):
            raise InvalidDensityError("Log-density values must be finite or -inf")
        mass = trapezoid(np.exp(log_density), grid)
        if abs(mass - 1.0) > NORMALIZATION_TOLERANCE:
            raise InvalidDensityError(
                f"The tabulated density integrates to {mass!r} under the trapezoid rule, not 1"
            )
        cdf = cumulative_trapezoid(np.exp(log_density), grid, initial=0.0) / mass
        for name, value in (("grid", grid), ("log_density", log_density), ("_cdf", cdf)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __eq__(self, other):
        return (
            isinstance(other, Tabulated)
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.log_density, other.log_density)
        )

    def __hash__(self):
        return hash((self.grid.tobytes(), self.log_density.tobytes()))

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.KIND,
            "grid": self.grid.tolist(),
            "log_density": self.log_density.tolist(),
        }

    def log_pdf(self, x: ArrayLike) -> ArrayLike:
        x = np.asarray(x, dtype=float)
        if np.any(x < self.grid[0]) or np.any(x > self.grid[-1]):
            raise OutOfSupportError(
                f"Observation outside of the tabulated support [{self.grid[0]}, {self.grid[-1]}]"
            )
        return np.interp(x, self.grid, self.log_density)

    def from_standard_normal(self, z: np.ndarray) -> np.ndarray:
        return np.interp(ndtr(np.asarray(z)), self._cdf, self.grid)


def _check_kl(value: float, direction: str):
    if not math.isfinite(value):
        raise InvalidDensityError(f"{direction} is infinite; the densities are not mutually continuous")
    if value <= KL_FLOOR:
        raise NondistinguishablePairError(
            f"{direction} is {value!r}; the pre- and post-change densities are indistinguishable"
        )


def _gaussian_kl(p: Gaussian, q: Gaussian) -> float:
    """D(p, q) = E_p[log p/q]"""
    return 0.5 * (
        p.variance / q.variance
        + (p.mean - q.mean) ** 2 / q.variance
        - 1.0
        + math.log(q.variance / p.variance)
    )


def _tabulated_kl(p: Tabulated, q: Tabulated) -> Tuple[float, float]:
    """Trapezoid estimate of D(p, q) and a Richardson estimate of its error"""
    density = np.exp(p.log_density)
    with np.errstate(invalid="ignore", divide="ignore"):
        integrand = np.where(density > 0, density * (p.log_density - q.log_density), 0.0)
    if np.any(np.isinf(integrand)):
        return math.inf, 0.0
    fine = float(trapezoid(integrand, p.grid))
    if len(p.grid) % 2 == 1:
        coarse = float(trapezoid(integrand[::2], p.grid[::2]))
        error = abs(fine - coarse) / 3.0
    else:
        error = math.nan
    return fine, error


def _kl(p: Density, q: Density) -> Tuple[float, float]:
    if isinstance(p, Gaussian) and isinstance(q, Gaussian):
        return _gaussian_kl(p, q), 0.0
    elif isinstance(p, Tabulated) and isinstance(q, Tabulated):
        if not np.array_equal(p.grid, q.grid):
            raise InvalidDensityError("Tabulated density pairs must share one grid")
        return _tabulated_kl(p, q)
    raise InvalidDensityError(
        f"Cannot pair a {p.KIND} density with a {q.KIND} density"
    )


@dataclass(frozen=True)
class SensorDensityPair:
    pre_change: Density
    post_change: Density

    def __post_init__(self):
        forward, _ = _kl(self.post_change, self.pre_change)
        _check_kl(forward, "D(f_1, f_0)")
        backward, _ = _kl(self.pre_change, self.post_change)
        _check_kl(backward, "D(f_0, f_1)")

    @classmethod
    def from_dict(cls, spec: Mapping[str, Any]) -> "SensorDensityPair":
        try:
            pre, post = spec["pre"], spec["post"]
        except KeyError as e:
            raise InvalidDensityError(f"A sensor needs both `pre` and `post` densities; missing {e!s}")
        return cls(pre_change=Density.from_dict(pre), post_change=Density.from_dict(post))

    def to_dict(self) -> Dict[str, Any]:
        return {"pre": self.pre_change.to_dict(), "post": self.post_change.to_dict()}

    def llr(self, x: ArrayLike) -> ArrayLike:
        return self.post_change.log_pdf(x) - self.pre_change.log_pdf(x)


def kl_number_with_error(pair: SensorDensityPair) -> Tuple[float, float]:
    """Returns D(f_1, f_0) in nats and an estimate of its numerical error"""
    value, error = _kl(pair.post_change, pair.pre_change)
    _check_kl(value, "D(f_1, f_0)")
    return value, error


def kl_number(pair: SensorDensityPair) -> float:
    return kl_number_with_error(pair)[0]


def kl_number_quadrature(pair: SensorDensityPair) -> float:
    """D(f_1, f_0) by adaptive quadrature; an independent check on the closed forms"""
    post, pre = pair.post_change, pair.pre_change

    def integrand(x: float) -> float:
        log_post = float(post.log_pdf(x))
        return math.exp(log_post) * (log_post - float(pre.log_pdf(x)))

    if isinstance(post, Tabulated):
        lower, upper = float(post.grid[0]), float(post.grid[-1])
        points = None
    else:
        assert isinstance(post, Gaussian)
        width = 40 * math.sqrt(post.variance)
        lower, upper = post.mean - width, post.mean + width
        points = [post.mean]
    value, _ = quad(integrand, lower, upper, points=points, epsabs=1e-13, epsrel=1e-12, limit=200)
    return value


def log_likelihood_ratio(pair: SensorDensityPair, x: ArrayLike) -> ArrayLike:
    return pair.llr(x)


@dataclass(frozen=True)
class ObservationModel:
    sensors: Tuple[SensorDensityPair, ...]

    def __post_init__(self):
        if not self.sensors:
            raise InvalidParameterError("An observation model needs at least one sensor")
        object.__setattr__(self, "sensors", tuple(self.sensors))

    @property
    def node_count(self) -> int:
        return len(self.sensors)

    def kls(self) -> np.ndarray:
        return np.array([kl_number(s) for s in self.sensors])

    def summary(self) -> "KLSummary":
        return KLSummary.from_kls(self.kls())

    def sample_block(self, rng: np.random.Generator, post_change: np.ndarray) -> np.ndarray:
        """
        Draws one observation per sensor for each period of a block. `post_change` is a boolean
        vector over the block's periods; rows where it is set come from the post-change
        densities. The generator is advanced by the same amount whatever the change time.
        """
        post_change = np.asarray(post_change, dtype=bool)
        z = rng.standard_normal((len(post_change), self.node_count))
        x = np.empty_like(z)
        for i, sensor in enumerate(self.sensors):
            x[:, i] = np.where(
                post_change,
                sensor.post_change.from_standard_normal(z[:, i]),
                sensor.pre_change.from_standard_normal(z[:, i]),
            )
        return x

    def llr_matrix(self, x: np.ndarray) -> np.ndarray:
        """Per-sensor log-likelihood ratios of a (periods, N) block of observations"""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.node_count:
            raise InvalidParameterError(
                f"Expected observations of shape (periods, {self.node_count}), got {x.shape}"
            )
        return np.column_stack([s.llr(x[:, i]) for i, s in enumerate(self.sensors)])


@dataclass(frozen=True, eq=False)
class KLSummary:
    per_sensor: np.ndarray
    centralized: float
    distributed: Dict[Tuple[int, float], float] = field(default_factory=dict)

    def __post_init__(self):
        per_sensor = np.asarray(self.per_sensor, dtype=float)
        if np.any(per_sensor <= 0):
            raise NondistinguishablePairError("Every per-sensor KL number must be positive")
        if abs(math.fsum(per_sensor) - self.centralized) > SANDWICH_TOLERANCE:
            raise InvalidParameterError(
                "The centralized KL number must equal the sum of the per-sensor numbers"
            )
        for (owner, gamma), value in self.distributed.items():
            self._check_sandwich(per_sensor, owner, gamma, value)
        per_sensor.setflags(write=False)
        object.__setattr__(self, "per_sensor", per_sensor)

    def _check_sandwich(self, per_sensor: np.ndarray, owner: int, gamma: float, value: float):
        if not (
            per_sensor[owner] - SANDWICH_TOLERANCE
            <= value
            <= self.centralized + SANDWICH_TOLERANCE
        ):
            raise InvalidParameterError(
                f"The distributed KL number {value!r} for sensor {owner} at gamma={gamma} lies "
                f"outside [{per_sensor[owner]!r}, {self.centralized!r}]"
            )

    @classmethod
    def from_kls(cls, kls: Sequence[float]) -> "KLSummary":
        kls = np.asarray(kls, dtype=float)
        return cls(per_sensor=kls, centralized=math.fsum(kls))

    def with_distributed(self, owner: int, gamma: float, value: float) -> "KLSummary":
        distributed = dict(self.distributed)
        distributed[(owner, gamma)] = value
        return KLSummary(self.per_sensor, self.centralized, distributed)


def subset_kl_sums(kls: np.ndarray) -> np.ndarray:
    """The total KL number of every subset mask"""
    kls = np.asarray(kls, dtype=float)
    masks = np.arange(1 << len(kls))
    bits = (masks[:, None] >> np.arange(len(kls))[None, :]) & 1
    return bits @ kls


def distributed_kl(sd: SubsetDistribution, kls: np.ndarray) -> float:
    kls = np.asarray(kls, dtype=float)
    if len(kls) != sd.node_count:
        raise InvalidParameterError(
            f"Expected {sd.node_count} per-sensor KL numbers, got {len(kls)}"
        )
    return math.fsum(sd.probs * subset_kl_sums(kls))


def kl_bounds_thm4(
    kls: np.ndarray, owner: int, bp: BoundParams, gamma: float
) -> Tuple[float, float]:
    """
    The asymptotic lower and upper bounds on the distributed KL number of `owner` at mean round
    count `gamma`. They are returned for any gamma; whether they hold at a finite gamma is for
    the caller to judge.
    """
    if bp.lower_unbounded or bp.beta <= 0:
        raise DegenerateBoundError(
            f"beta = 0 at window {bp.window}; the upper KL bound is undefined"
        )
    kls = np.asarray(kls, dtype=float)
    others = np.delete(kls, owner)
    total = math.fsum(kls)
    lower = total - float(others.max()) * math.exp(gamma * bp.upper_rate)
    upper = total - float(others.min()) * math.exp(gamma * bp.lower_rate)
    return lower, upper


def kl_envelope(
    kls: np.ndarray, owner: int, window_factors: Tuple[float, float]
) -> Tuple[float, float]:
    """
    Rigorous bounds on the distributed KL number at a finite mean round count, from the pair
    returned by `markov.window_envelope`
    """
    kls = np.asarray(kls, dtype=float)
    lower_factor, upper_factor = window_factors
    total = math.fsum(kls)
    others = math.fsum(np.delete(kls, owner))
    return total - others * upper_factor, total - others * lower_factor
