"""
Loading and validating experiment configuration files.

Config files are YAML mappings; see the README for the schema. Every value is validated with
the same checks the library's constructors apply, and failures name the offending field.
"""

import logging
import math
from importlib.resources import files
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

import yaml

from .detector import DetectorMode
from .exceptions import ConfigurationError, GossipQCDError, TooLargeError, TopologyError
from .experiments import DEFAULT_THRESHOLDS, ExperimentConfig
from .obsmodel import (
    InvalidDensityError,
    NondistinguishablePairError,
    ObservationModel,
    SensorDensityPair,
)
from .rounds import RoundLaw
from .topology import (
    DisconnectedGraphError,
    MatchingLaw,
    Graph,
    SequentialMatchingSampler,
    averaged_matrix,
    build_graph,
    check_irreducible_aperiodic,
    enumerate_matchings,
    explicit_distribution,
    uniform_distribution,
)

logger = logging.getLogger(__name__)

REFERENCE_CONFIG = "reference.yaml"

DEFAULTS: Dict[str, Any] = {
    "master_seed": None,
    "rho": 0.1,
    "gamma": 6.0,
    "rounds": "poisson",
    "mode": "centralized",
    "thresholds": list(DEFAULT_THRESHOLDS),
    "trials_per_threshold": 100_000,
    "max_horizon": 2000,
    "max_horizon_limit": 64_000,
    "censor_cap": 0.001,
}
REQUIRED = ("network", "sensors")
DISTRIBUTIONS = ("uniform_enumerated", "sequential", "explicit")


class ConfigParseError(ConfigurationError):
    code = "E_CONFIG_PARSE"


class ConfigValidationError(ConfigurationError):
    code = "E_CONFIG_INVALID"

    def __init__(self, field: str, message: str):
        super().__init__(f"invalid `{field}`: {message}")
        self.field: str = field


def reference_config_path() -> Path:
    return Path(str(files("gossipqcd") / "configs" / REFERENCE_CONFIG))


def _number(data: Mapping[str, Any], key: str, integer: bool = False) -> Any:
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigValidationError(key, f"expected a number, got {value!r}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigValidationError(key, f"expected an integer, got {value!r}")
        return int(value)
    if not math.isfinite(value):
        raise ConfigValidationError(key, f"expected a finite number, got {value!r}")
    return float(value)


def _checked(key: str, value: Any, ok: Callable[[Any], bool], message: str) -> Any:
    if not ok(value):
        raise ConfigValidationError(key, message.format(value=value))
    return value


def _build_law(network: Mapping[str, Any], graph: Graph) -> Tuple[MatchingLaw, str]:
    spec = network.get("distribution", "uniform_enumerated")
    try:
        if spec == "uniform_enumerated":
            return uniform_distribution(enumerate_matchings(graph), graph), spec
        elif spec == "sequential":
            return SequentialMatchingSampler(graph), spec
        elif isinstance(spec, Mapping) and set(spec) == {"explicit"}:
            entries = []
            for k, entry in enumerate(spec["explicit"] or ()):
                if not isinstance(entry, Mapping) or set(entry) != {"partner", "weight"}:
                    raise ConfigValidationError(
                        f"network.distribution.explicit[{k}]",
                        "each entry needs exactly `partner` and `weight`",
                    )
                entries.append((entry["partner"], entry["weight"]))
            return explicit_distribution(graph, entries), "explicit"
    except (TopologyError, TooLargeError) as e:
        raise ConfigValidationError("network.distribution", str(e))
    except (TypeError, ValueError) as e:
        raise ConfigValidationError("network.distribution", f"malformed entry: {e!s}")
    raise ConfigValidationError(
        "network.distribution",
        f"expected one of {', '.join(DISTRIBUTIONS[:2])} or an `explicit` list, got {spec!r}",
    )


def config_from_dict(data: Any, seed: Optional[int] = None) -> ExperimentConfig:
    """Validates a parsed config mapping; `seed` overrides the configured master seed"""
    if not isinstance(data, Mapping):
        raise ConfigValidationError("<root>", "the configuration must be a mapping")
    unknown = set(data) - set(DEFAULTS) - set(REQUIRED)
    if unknown:
        raise ConfigValidationError(sorted(unknown)[0], "unknown configuration key")
    for key in REQUIRED:
        if key not in data:
            raise ConfigValidationError(key, "this key is required")
    merged = {**DEFAULTS, **{k: v for k, v in data.items() if v is not None or k == "master_seed"}}

    rho = _checked("rho", _number(merged, "rho"), lambda v: 0 < v < 1, "must lie strictly inside (0, 1), not {value!r}")
    gamma = _checked("gamma", _number(merged, "gamma"), lambda v: v >= 0, "must be non-negative, not {value!r}")
    rounds = _checked(
        "rounds",
        merged["rounds"],
        lambda v: v in RoundLaw.LAWS_BY_NAME,
        f"must be one of {', '.join(sorted(RoundLaw.LAWS_BY_NAME))}, not {{value!r}}",
    )
    try:
        RoundLaw.factory(rounds)(gamma)
    except GossipQCDError as e:
        raise ConfigValidationError("gamma", str(e))
    try:
        mode = DetectorMode.parse(str(merged["mode"]))
    except GossipQCDError as e:
        raise ConfigValidationError("mode", str(e))

    thresholds = merged["thresholds"]
    if not isinstance(thresholds, list) or not thresholds:
        raise ConfigValidationError("thresholds", "expected a non-empty list")
    thresholds = [_number({"thresholds": t}, "thresholds") for t in thresholds]
    if any(a <= 0 for a in thresholds):
        raise ConfigValidationError("thresholds", "every threshold must be positive")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigValidationError("thresholds", "thresholds must be strictly increasing")

    trials = _checked("trials_per_threshold", _number(merged, "trials_per_threshold", True), lambda v: v >= 1, "must be at least 1")
    max_horizon = _checked("max_horizon", _number(merged, "max_horizon", True), lambda v: v >= 1, "must be at least 1")
    max_horizon_limit = _checked(
        "max_horizon_limit",
        _number(merged, "max_horizon_limit", True),
        lambda v: v >= max_horizon,
        "must be at least max_horizon",
    )
    censor_cap = _checked("censor_cap", _number(merged, "censor_cap"), lambda v: 0 <= v < 1, "must lie in [0, 1)")
    if seed is None and merged["master_seed"] is not None:
        seed = _checked("master_seed", _number(merged, "master_seed", True), lambda v: v >= 0, "must be non-negative")
    elif seed is not None and seed < 0:
        raise ConfigValidationError("master_seed", "the seed must be non-negative")

    network = merged["network"]
    if not isinstance(network, Mapping) or "nodes" not in network:
        raise ConfigValidationError("network", "expected a mapping with `nodes`, `edges` and `distribution`")
    unknown = set(network) - {"nodes", "edges", "distribution"}
    if unknown:
        raise ConfigValidationError(f"network.{sorted(unknown)[0]}", "unknown network key")
    nodes = _number(network, "nodes", integer=True)
    try:
        graph = build_graph(nodes, network.get("edges") or [])
    except DisconnectedGraphError as e:
        raise ConfigValidationError("connectivity", str(e))
    except TopologyError as e:
        raise ConfigValidationError("network.edges", str(e))
    except (TypeError, ValueError) as e:
        raise ConfigValidationError("network.edges", f"malformed edge list: {e!s}")
    law, distribution = _build_law(network, graph)
    if law.enumerable:
        a_bar = averaged_matrix(law)  # type: ignore
        if not check_irreducible_aperiodic(a_bar):
            raise ConfigValidationError(
                "irreducibility",
                "the averaged matrix of the matching distribution is not irreducible and aperiodic",
            )

    sensors = merged["sensors"]
    if not isinstance(sensors, list) or len(sensors) != nodes:
        raise ConfigValidationError("sensors", f"expected a list of {nodes} sensor density pairs")
    pairs = []
    for i, sensor in enumerate(sensors):
        if not isinstance(sensor, Mapping):
            raise ConfigValidationError(f"sensors[{i}]", "expected a mapping with `pre` and `post`")
        try:
            pairs.append(SensorDensityPair.from_dict(sensor))
        except NondistinguishablePairError as e:
            raise ConfigValidationError("kl", f"sensor {i}: {e!s}")
        except InvalidDensityError as e:
            raise ConfigValidationError(f"sensors[{i}]", str(e))

    if mode.sensor is not None and mode.sensor >= nodes:
        raise ConfigValidationError("mode", f"sensor {mode.sensor} is not one of the {nodes} sensors")
    try:
        return ExperimentConfig(
            graph=graph,
            law=law,
            model=ObservationModel(tuple(pairs)),
            distribution=distribution,
            rho=rho,
            gamma=gamma,
            rounds=rounds,
            mode=mode,
            thresholds=tuple(thresholds),
            trials_per_threshold=trials,
            max_horizon=max_horizon,
            max_horizon_limit=max_horizon_limit,
            censor_cap=censor_cap,
            master_seed=seed,
        )
    except GossipQCDError as e:
        raise ConfigValidationError("<root>", str(e))


def load_config(path: Union[str, Path], seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigParseError(f"Configuration file {path!s} does not exist")
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else "unknown position"
        raise ConfigParseError(f"{path!s}: {where}: {e.problem}")
    except yaml.YAMLError as e:
        raise ConfigParseError(f"{path!s}: {e!s}")
    except OSError as e:
        raise ConfigParseError(f"Could not read {path!s}: {e!s}")
    config = config_from_dict(data, seed=seed)
    logger.debug(f"Loaded a {config.node_count}-sensor configuration from {path!s}")
    return config
