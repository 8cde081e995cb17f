import math
from abc import ABC, abstractmethod
from inspect import isabstract
from typing import Callable, Dict, Tuple, Type

import numpy as np
from scipy.stats import poisson

from .exceptions import InvalidParameterError

DEFAULT_TAIL_EPS = 1e-10


class InvalidEpsError(InvalidParameterError):
    code = "E_INVALID_EPS"


def check_tail_eps(tail_eps: float):
    if not 0 < tail_eps <= 1e-6:
        raise InvalidEpsError(f"tail_eps must lie in (0, 1e-6], not {tail_eps!r}")


def sample_round_count(gamma: float, rng: np.random.Generator) -> int:
    if not gamma >= 0:
        raise InvalidParameterError(f"The mean round count must be non-negative, not {gamma!r}")
    if gamma == 0:
        return 0
    return int(rng.poisson(gamma))


class RoundLaw(ABC):
    """The law of the number of gossip rounds M in one observation period"""

    LAWS_BY_NAME: Dict[str, Type["RoundLaw"]]
    NAME: str

    def __init__(self, gamma: float):
        if not gamma >= 0 or math.isinf(gamma):
            raise InvalidParameterError(f"gamma must be a finite non-negative number, not {gamma!r}")
        self.gamma: float = float(gamma)

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if not isabstract(cls):
            if not hasattr(RoundLaw, "LAWS_BY_NAME"):
                RoundLaw.LAWS_BY_NAME = {}
            if not getattr(cls, "NAME", None):
                raise TypeError(f"{cls.__name__} must define a NAME attribute")
            elif cls.NAME in RoundLaw.LAWS_BY_NAME:
                raise TypeError(
                    f"Round law {cls.__name__} cannot be named {cls.NAME} because that name is "
                    f"already assigned to {RoundLaw.LAWS_BY_NAME[cls.NAME]}"
                )
            RoundLaw.LAWS_BY_NAME[cls.NAME] = cls

    @classmethod
    def factory(cls, name: str) -> Callable[[float], "RoundLaw"]:
        try:
            return cls.LAWS_BY_NAME[name]
        except KeyError:
            raise InvalidParameterError(
                f"Unknown round law {name!r}; expected one of {', '.join(sorted(cls.LAWS_BY_NAME))}"
            )

    def __eq__(self, other):
        return (
            isinstance(other, RoundLaw)
            and self.NAME == other.NAME
            and self.gamma == other.gamma
        )

    def __hash__(self):
        return hash((self.NAME, self.gamma))

    def __repr__(self):
        return f"{self.__class__.__name__}(gamma={self.gamma!r})"

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> int:
        raise NotImplementedError()

    @abstractmethod
    def weights(self, tail_eps: float = DEFAULT_TAIL_EPS) -> Tuple[np.ndarray, float]:
        """Returns the probabilities of M = 0, 1, ..., m* and the probability mass
        beyond m* that was folded into the last entry"""
        raise NotImplementedError()

    def expect(
        self, f: Callable[[np.ndarray], np.ndarray], tail_eps: float = DEFAULT_TAIL_EPS
    ) -> float:
        w, _ = self.weights(tail_eps)
        return math.fsum(w * f(np.arange(len(w))))


class PoissonRounds(RoundLaw):
    NAME = "poisson"

    def sample(self, rng: np.random.Generator) -> int:
        return sample_round_count(self.gamma, rng)

    def weights(self, tail_eps: float = DEFAULT_TAIL_EPS) -> Tuple[np.ndarray, float]:
        check_tail_eps(tail_eps)
        if self.gamma == 0:
            return np.ones(1), 0.0
        m_star = max(int(poisson.isf(tail_eps, self.gamma)), 0)
        while poisson.sf(m_star, self.gamma) >= tail_eps:
            m_star += 1
        # m* is the smallest count whose tail falls below tail_eps
        while m_star > 0 and poisson.sf(m_star - 1, self.gamma) < tail_eps:
            m_star -= 1
        w = poisson.pmf(np.arange(m_star + 1), self.gamma)
        truncated = float(poisson.sf(m_star, self.gamma))
        # the pmf terms can overshoot 1 by a few ulps, so the fold-in must not go negative
        w[-1] = max(w[-1] + 1.0 - math.fsum(w), 0.0)
        w /= math.fsum(w)
        return w, truncated


class FixedRounds(RoundLaw):
    NAME = "fixed"

    def __init__(self, gamma: float):
        super().__init__(gamma)
        if self.gamma != int(self.gamma):
            raise InvalidParameterError(
                f"A fixed round count must be an integer, not {gamma!r}"
            )

    @property
    def rounds(self) -> int:
        return int(self.gamma)

    def sample(self, rng: np.random.Generator) -> int:
        return self.rounds

    def weights(self, tail_eps: float = DEFAULT_TAIL_EPS) -> Tuple[np.ndarray, float]:
        check_tail_eps(tail_eps)
        w = np.zeros(self.rounds + 1)
        w[-1] = 1.0
        return w, 0.0
