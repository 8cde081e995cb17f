import argparse
import logging
import math
import sys
from pathlib import Path
from shutil import rmtree
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import randomname
from rich import traceback
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import __version__
from .config import config_from_dict, load_config, reference_config_path
from .exceptions import GossipQCDError
from .experiments import (
    ExperimentConfig,
    FirstLayerResult,
    all_modes,
    kl_convergence_sweep,
    rate_ordering_violations,
    run_first_layer,
    second_layer_curve,
)
from .gossip import subset_distribution_mc, subset_distributions_exact
from .markov import DEFAULT_WINDOW, bounds_vs_window
from .output import RunManifest, write_csv
from .rounds import RoundLaw
from .validation import render_results, run_checks

logger = logging.getLogger(__name__)
logging.getLogger("statsmodels").setLevel(logging.WARNING)
logging.getLogger("networkx").setLevel(logging.WARNING)

SUBCOMMANDS = ("first-layer", "second-layer", "bounds", "kl-sweep", "gossip-stats", "validate")
GOSSIP_STATS_STREAM = 4


def parse_grid(text: str) -> List[float]:
    """Parses `a..b` (inclusive, step 1), `a..b:s`, or a comma-separated list"""
    text = text.strip()
    try:
        if ".." in text:
            bounds, _, step_text = text.partition(":")
            start_text, _, stop_text = bounds.partition("..")
            start, stop = float(start_text), float(stop_text)
            step = float(step_text) if step_text else 1.0
            if step <= 0 or stop < start:
                raise ValueError()
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [start + k * step for k in range(count)]
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"invalid grid {text!r}; expected `a..b`, `a..b:step`, or a comma-separated list"
        )
    if not values:
        raise argparse.ArgumentTypeError("the grid is empty")
    return values


def parse_int_grid(text: str) -> List[int]:
    values = parse_grid(text)
    if any(not v.is_integer() for v in values):
        raise argparse.ArgumentTypeError(f"{text!r} must only contain integers")
    return [int(v) for v in values]


def run_first_layer_command(
    config: ExperimentConfig, args: argparse.Namespace, output_dir: Path, console: Console
) -> List[Path]:
    config.require_seed()
    changes: Dict[str, Any] = {}
    if args.trials is not None:
        changes["trials_per_threshold"] = args.trials
    if args.thresholds is not None:
        changes["thresholds"] = tuple(args.thresholds)
    if changes:
        config = config.with_changes(**changes)
    modes = all_modes(config.node_count) if args.modes == "all" else [config.mode]
    results = run_first_layer(config, modes, workers=args.workers, console=console)
    render_fits(results, console)
    if args.modes == "all":
        for violation in rate_ordering_violations(results):
            logger.warning(f"Rate ordering violated: {violation}")
    points = write_csv(
        output_dir / "first-layer.csv",
        ("mode", "sensor", "A", "cadd1", "cadd1_se", "pfa", "pfa_se", "ln_pfa", "add", "add_se", "censored"),
        (
            (r.mode.kind, r.mode.sensor, p.threshold, p.cadd1, p.cadd1_se, p.pfa, p.pfa_se,
             p.log_pfa, p.add, p.add_se, p.censored)
            for r in results
            for p in r.points
        ),
    )
    fits = write_csv(
        output_dir / "decay-fits.csv",
        ("mode", "sensor", "slope", "stderr", "target_rate", "intercept", "r_squared"),
        (
            (r.mode.kind, r.mode.sensor,
             r.fit.slope if r.fit else None,
             r.fit.slope_stderr if r.fit else None,
             r.target,
             r.fit.intercept if r.fit else None,
             r.fit.r_squared if r.fit else None)
            for r in results
        ),
    )
    return [points, fits]


def render_fits(results: Sequence[FirstLayerResult], console: Console):
    table = Table(title="First-Layer Decay Rates")
    table.add_column("Detector", justify="left", style="bold cyan", no_wrap=True)
    table.add_column("Fitted slope", justify="right", style="green")
    table.add_column("Target", justify="right", style="magenta")
    table.add_column("Relative error", justify="right", style="blue")
    for result in results:
        if result.fit is None:
            table.add_row(str(result.mode), "n/a", f"{result.target:.5f}", "")
            continue
        table.add_row(
            str(result.mode),
            f"{result.fit.slope:.5f} ± {result.fit.slope_stderr:.5f}",
            f"{result.target:.5f}",
            f"{abs(result.fit.slope / result.target - 1):.1%}",
        )
    console.print(table)


def run_second_layer_command(
    config: ExperimentConfig, args: argparse.Namespace, output_dir: Path, console: Console
) -> List[Path]:
    if args.method == "mc":
        config.require_seed()
    rows = second_layer_curve(
        config, args.gammas, owner=args.owner, window=args.L, method=args.method, trials=args.trials
    )
    return [
        write_csv(
            output_dir / "second-layer.csv",
            ("gamma", "owner", "rate", "lower_rate", "upper_rate", "envelope_lower",
             "envelope_upper", "method", "incomplete", "limit_rate", "stderr"),
            (
                (r.gamma, r.owner, r.rate, r.lower_rate, r.upper_rate, r.envelope_lower,
                 r.envelope_upper, r.method, r.incomplete, r.limit_rate, r.stderr)
                for r in rows
            ),
        )
    ]


def run_bounds_command(
    config: ExperimentConfig, args: argparse.Namespace, output_dir: Path, console: Console
) -> List[Path]:
    params = bounds_vs_window(config.a_bar, args.target, args.L)
    return [
        write_csv(
            output_dir / "bounds.csv",
            ("L", "alpha", "beta", "upper_rate", "lower_rate"),
            ((bp.window, bp.alpha, bp.beta, bp.upper_rate, bp.lower_rate) for bp in params),
        )
    ]


def run_kl_sweep_command(
    config: ExperimentConfig, args: argparse.Namespace, output_dir: Path, console: Console
) -> List[Path]:
    rows = kl_convergence_sweep(config, args.gammas, owner=args.owner, window=args.L)
    return [
        write_csv(
            output_dir / "kl-sweep.csv",
            ("gamma", "owner", "exact_dkl", "thm4_lower", "thm4_upper", "centralized_kl",
             "thm4_holds", "envelope_lower", "envelope_upper", "gap_bound"),
            (
                (r.gamma, r.owner, r.exact_dkl, r.thm4_lower, r.thm4_upper, r.centralized_kl,
                 r.thm4_holds, r.envelope_lower, r.envelope_upper, r.gap_bound)
                for r in rows
            ),
        )
    ]


def run_gossip_stats_command(
    config: ExperimentConfig, args: argparse.Namespace, output_dir: Path, console: Console
) -> List[Path]:
    gammas = args.gammas if args.gammas is not None else [config.gamma]
    factory = RoundLaw.factory(config.rounds)
    owner = args.owner
    rows: List[Sequence[Any]] = []
    exact = None
    if args.method in ("exact", "both"):
        exact = subset_distributions_exact(config.law, gammas, owner, rounds=factory)
    if args.method in ("mc", "both"):
        seed = config.require_seed()
    for g, gamma in enumerate(gammas):
        if exact is not None:
            sd = exact[g]
            rows.extend((gamma, mask, p, "exact", None) for mask, p in enumerate(sd.probs) if (mask >> owner) & 1)
        if args.method in ("mc", "both"):
            rng = np.random.default_rng(np.random.SeedSequence([seed, GOSSIP_STATS_STREAM, owner, g]))
            sd = subset_distribution_mc(config.law, gamma, owner, args.trials, rng, factory)
            assert sd.stderr is not None
            rows.extend(
                (gamma, mask, p, "mc", sd.stderr[mask])
                for mask, p in enumerate(sd.probs)
                if (mask >> owner) & 1
            )
    return [
        write_csv(
            output_dir / "gossip-stats.csv",
            ("gamma", "subset_mask", "probability", "method", "stderr"),
            rows,
        )
    ]


class ValidationFailed(GossipQCDError):
    code = "E_VALIDATION"


def run_validate_command(
    config: ExperimentConfig, args: argparse.Namespace, output_dir: Path, console: Console
) -> List[Path]:
    results = list(run_checks(config, seed=config.master_seed))
    render_results(results, console)
    path = write_csv(
        output_dir / "validate.csv",
        ("check", "passed", "skipped", "detail"),
        ((r.name, r.passed, r.skipped, r.detail) for r in results),
    )
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ValidationFailed(f"{len(failed)} invariant check(s) failed: {'; '.join(failed)}")
    return [path]


COMMANDS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace, Path, Console], List[Path]]] = {
    "first-layer": run_first_layer_command,
    "second-layer": run_second_layer_command,
    "bounds": run_bounds_command,
    "kl-sweep": run_kl_sweep_command,
    "gossip-stats": run_gossip_stats_command,
    "validate": run_validate_command,
}

# the subcommand options that change outputs, and so are recorded in manifests
RECORDED_OPTIONS = {
    "first-layer": ("modes", "trials", "thresholds"),
    "second-layer": ("gammas", "owner", "L", "method", "trials"),
    "bounds": ("L", "target"),
    "kl-sweep": ("gammas", "owner", "L"),
    "gossip-stats": ("gammas", "owner", "method", "trials"),
    "validate": (),
}


def prepare_output_dir(subcommand: str, output_dir: Optional[Path], force: bool) -> Optional[Path]:
    """Returns the output directory, or None if it exists and may not be overwritten"""
    if output_dir is None:
        output_dir = Path("runs") / f"{subcommand}-{randomname.get_name()}"
    if output_dir.exists():
        if force:
            rmtree(output_dir)
        else:
            logger.error(
                f"The output directory {output_dir!s} already exists; either choose a different output "
                f"path, delete the directory, or run again with the `--force` option."
            )
            return None
    output_dir.mkdir(parents=True)
    return output_dir


def discard_empty_output_dir(output_dir: Optional[Path]):
    """Removes an output directory that a failed run left without any results"""
    if output_dir is None or not output_dir.is_dir():
        return
    if any(output_dir.iterdir()):
        logger.info(f"Partial results were kept in {output_dir!s}")
        return
    rmtree(output_dir)


def dispatch(
    subcommand: str,
    config: ExperimentConfig,
    args: argparse.Namespace,
    output_dir: Path,
    console: Console,
) -> int:
    outputs = COMMANDS[subcommand](config, args, output_dir, console)
    manifest = RunManifest(
        subcommand=subcommand,
        config=config.to_dict(),
        master_seed=config.master_seed,
        options={name: getattr(args, name) for name in RECORDED_OPTIONS[subcommand]},
        outputs=[p.name for p in outputs],
    )
    manifest.write(output_dir)
    logger.info(f"Results were saved to {output_dir!s}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "config",
        type=Path,
        nargs="?",
        help="path to a YAML experiment configuration (default=the bundled reference configuration)",
    )
    common.add_argument(
        "--manifest",
        type=Path,
        help="rerun from the manifest.json of an earlier run instead of a configuration file",
    )
    common.add_argument(
        "--seed", type=int, help="the master seed; overrides `master_seed` in the configuration"
    )
    common.add_argument(
        "--workers",
        "-j",
        type=int,
        default=1,
        help="the number of worker processes for Monte Carlo trials (default=1)",
    )
    output_section = common.add_argument_group(title="output")
    output_section.add_argument(
        "--output-dir",
        "-o",
        type=Path,
        help="the directory in which to save CSV results and the run manifest "
        "(default=runs/<subcommand>-<random name>)",
    )
    output_section.add_argument(
        "--force",
        "-f",
        action="store_true",
        help="overwrite an existing --output-dir if it already exists",
    )
    log_section = common.add_argument_group(title="logging")
    log_group = log_section.add_mutually_exclusive_group()
    log_group.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        choices=list(
            logging.getLevelName(x)
            for x in range(1, 101)
            if not logging.getLevelName(x).startswith("Level")
        ),
        help="sets the log level for gossipqcd (default=INFO)",
    )
    log_group.add_argument(
        "--debug", action="store_true", help="equivalent to `--log-level=DEBUG`"
    )
    log_group.add_argument(
        "--quiet",
        action="store_true",
        help="equivalent to `--log-level=CRITICAL`",
    )

    parser = argparse.ArgumentParser(
        prog="gossipqcd",
        description="distributed Bayesian quickest change detection over gossip sensor networks",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", required=True)

    first = subparsers.add_parser(
        "first-layer",
        parents=[common],
        help="estimate PFA and CADD_1 per threshold and fit the first-layer decay rates",
    )
    first.add_argument(
        "--modes",
        choices=("config", "all"),
        default="config",
        help="run only the configured detector, or the centralized detector plus every isolated and "
        "distributed detector (default=config)",
    )
    first.add_argument("--trials", type=int, help="overrides `trials_per_threshold`")
    first.add_argument(
        "--thresholds", type=parse_grid, help="overrides the threshold grid, e.g. `10,100,1000`"
    )

    second = subparsers.add_parser(
        "second-layer",
        parents=[common],
        help="the decay of the probability that some observation misses a sensor",
    )
    second.add_argument("--gammas", type=parse_grid, default=parse_grid("20..60"),
                        help="mean round counts (default=20..60)")
    second.add_argument("--owner", type=int, default=0, help="the receiving sensor (default=0)")
    second.add_argument("--L", type=int, default=DEFAULT_WINDOW,
                        help=f"the hitting-time window (default={DEFAULT_WINDOW})")
    second.add_argument("--method", choices=("exact", "mc"), default="exact",
                        help="how to compute subset distributions (default=exact)")
    second.add_argument("--trials", type=int, default=100_000,
                        help="Monte Carlo periods per gamma (default=100000)")

    bounds = subparsers.add_parser(
        "bounds", parents=[common], help="hitting-time bound parameters for a range of windows"
    )
    bounds.add_argument("--L", type=parse_int_grid, default=parse_int_grid(f"1..{DEFAULT_WINDOW}"),
                        help=f"the windows (default=1..{DEFAULT_WINDOW})")
    bounds.add_argument("--target", type=int, default=0, help="the target sensor (default=0)")

    sweep = subparsers.add_parser(
        "kl-sweep",
        parents=[common],
        help="the distributed KL number and its bounds over a range of mean round counts",
    )
    sweep.add_argument("--gammas", type=parse_grid, default=parse_grid("0..60"),
                       help="mean round counts (default=0..60)")
    sweep.add_argument("--owner", type=int, default=0, help="the sensor (default=0)")
    sweep.add_argument("--L", type=int, default=DEFAULT_WINDOW,
                       help=f"the hitting-time window (default={DEFAULT_WINDOW})")

    stats = subparsers.add_parser(
        "gossip-stats", parents=[common], help="the subset distribution of one sensor's reach set"
    )
    stats.add_argument("--gammas", type=parse_grid, help="mean round counts (default=the configured gamma)")
    stats.add_argument("--owner", type=int, default=0, help="the sensor (default=0)")
    stats.add_argument("--method", choices=("exact", "mc", "both"), default="both",
                       help="(default=both)")
    stats.add_argument("--trials", type=int, default=100_000,
                       help="Monte Carlo periods per gamma (default=100000)")

    subparsers.add_parser(
        "validate", parents=[common], help="run the invariant suite on a configuration"
    )
    return parser


def load_run_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.manifest is not None:
        if args.config is not None:
            logger.warning("Ignoring the configuration path because --manifest was given")
        manifest = RunManifest.read(args.manifest)
        if manifest.subcommand != args.subcommand:
            raise GossipQCDError(
                f"{args.manifest!s} records a `{manifest.subcommand}` run, not `{args.subcommand}`"
            )
        for name, value in manifest.options.items():
            setattr(args, name, value)
        seed = args.seed if args.seed is not None else manifest.master_seed
        return config_from_dict(manifest.config, seed=seed)
    path = args.config
    if path is None:
        path = reference_config_path()
        logger.info(f"Using the reference configuration at {path!s}")
    return load_config(path, seed=args.seed)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.debug:
        numeric_log_level = logging.DEBUG
    elif args.quiet:
        numeric_log_level = logging.CRITICAL
    else:
        log_level = getattr(logging, args.log_level.upper(), None)
        if not isinstance(log_level, int):
            sys.stderr.write(f"Invalid log level: {args.log_level}\n")
            return 1
        numeric_log_level = log_level

    console = Console(log_path=False, file=sys.stderr)

    logging.basicConfig(
        level=numeric_log_level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console)],
    )

    traceback.install(show_locals=True)

    if args.workers < 1:
        parser.error("--workers must be at least 1")

    output_dir = None
    try:
        config = load_run_config(args)
        output_dir = prepare_output_dir(args.subcommand, args.output_dir, args.force)
        if output_dir is None:
            return 1
        status = dispatch(args.subcommand, config, args, output_dir, console)
    except GossipQCDError as e:
        if logger.isEnabledFor(logging.DEBUG):
            logger.exception(str(e))
        message = " ".join(str(e).split())
        sys.stderr.write(f"{e.code}: {message}\n")
        discard_empty_output_dir(output_dir)
        return 1
    except KeyboardInterrupt:
        console.show_cursor()
        return 1

    sys.stdout.write(f"{output_dir!s}\n")
    sys.stdout.flush()
    return status
