class GossipQCDError(RuntimeError):
    code: str = "E_RUNTIME"


class InvalidParameterError(GossipQCDError, ValueError):
    code = "E_PARAMETER"


class TooLargeError(GossipQCDError):
    code = "E_TOO_LARGE"


class TopologyError(GossipQCDError):
    code = "E_TOPOLOGY"


class AnalysisError(GossipQCDError):
    code = "E_ANALYSIS"


class ModelError(GossipQCDError):
    code = "E_MODEL"


class DetectorError(GossipQCDError):
    code = "E_DETECTOR"


class ExperimentError(GossipQCDError):
    code = "E_EXPERIMENT"


class ConfigurationError(GossipQCDError):
    code = "E_CONFIG"
