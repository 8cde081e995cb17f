from logging import Handler, Logger, getLogger
from typing import Iterator, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TextColumn,
    TimeElapsedColumn,
    TimeRemainingColumn,
)

_logger = getLogger(__name__)


def handlers(logger: Logger) -> Iterator[Handler]:
    log: Optional[Logger] = logger
    while log is not None:
        yield from log.handlers
        log = log.parent


def get_console(logger: Logger) -> Console:
    for handler in handlers(logger):
        if isinstance(handler, RichHandler):
            return handler.console
    return Console(stderr=True)


def trial_progress(console: Optional[Console] = None, transient: bool = True) -> Progress:
    """A progress display for Monte Carlo loops, counted in completed trials"""
    if console is None:
        console = get_console(_logger)
    return Progress(
        TextColumn("[bold blue]{task.description}", justify="right"),
        BarColumn(bar_width=None),
        MofNCompleteColumn(),
        "•",
        TimeElapsedColumn(),
        "•",
        TimeRemainingColumn(),
        console=console,
        transient=transient,
        disable=not console.is_terminal,
    )
