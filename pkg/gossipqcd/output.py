import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from . import __version__
from .exceptions import GossipQCDError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class ManifestError(GossipQCDError):
    code = "E_MANIFEST"


def format_value(value: Any) -> str:
    if value is None:
        return ""
    elif isinstance(value, bool):
        return "true" if value else "false"
    elif isinstance(value, int):
        return str(value)
    elif isinstance(value, float):
        if math.isnan(value):
            return "nan"
        elif math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    count = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"Expected {len(columns)} values per row, got {len(row)}")
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.info(f"Wrote {count} row(s) to {path!s}")
    return path


@dataclass
class RunManifest:
    subcommand: str
    config: Dict[str, Any]
    master_seed: Optional[int]
    options: Dict[str, Any] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    def write(self, directory: Path) -> Path:
        path = directory / MANIFEST_NAME
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"Could not read the run manifest {path!s}: {e!s}")
        if not isinstance(data, dict):
            raise ManifestError(f"{path!s} is not a run manifest")
        if data.get("version") != __version__:
            logger.warning(
                f"{path!s} was written by version {data.get('version')} but this is "
                f"version {__version__}; outputs may differ"
            )
        try:
            return cls(**data)
        except TypeError as e:
            raise ManifestError(f"{path!s} is not a run manifest: {e!s}")
