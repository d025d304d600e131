"""Logging setup and rich progress bars for long-running work (bank builds, ablation sweeps)"""

from logging import WARNING, getLogger
from typing import Dict, Union

from rich.console import Console
from rich.live import Live
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, TimeRemainingColumn
from rich.table import Table

# Logs and progress go to stderr, leaving stdout for command output
stderr_console = Console(stderr=True)
logger = getLogger(__name__)


def enable_logging(level: Union[int, str] = 'INFO', external_level: Union[int, str] = WARNING):
    """Show log output from memattn in the terminal, formatted with rich.

    Args:
        level: Log level for memattn modules
        external_level: Log level for all other libraries
    """
    handler = RichHandler(
        console=stderr_console, rich_tracebacks=True, markup=False, show_path=False
    )
    root = getLogger()
    root.setLevel(external_level)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        root.addHandler(handler)
    getLogger('memattn').setLevel(level)


class MultiProgress:
    """Track progress of multiple jobs run in serial (one per class bank), plus overall progress

    Args:
        totals: Number of items per job name
        task_description: Verb shown next to each job name
    """

    def __init__(self, totals: Dict[str, int], task_description: str = 'Building'):
        self.total_progress = get_progress(console=stderr_console)
        self.total_task = self.total_progress.add_task('[cyan]Total', total=sum(totals.values()))
        self.job_progress = get_progress(console=stderr_console)
        self.job_task = self.job_progress.add_task('[cyan]Job  ')

        self.table = Table.grid()
        self.table.add_row(self.total_progress)
        self.table.add_row(self.job_progress)
        self.task_description = task_description
        self.totals = totals
        self.live = Live(self.table, refresh_per_second=10, console=stderr_console)

    def __enter__(self):
        self.live.__enter__()
        return self

    def __exit__(self, *args):
        self.live.__exit__(*args)

    def start_job(self, name: str):
        self.job_progress.update(self.job_task, completed=0, total=self.totals[name])
        self.job_progress.log(f'[cyan]{self.task_description} [white]{name}[cyan]...')

    def advance(self, advance: int = 1):
        self.total_progress.advance(self.total_task, advance)
        self.job_progress.advance(self.job_task, advance)


class NullProgress:
    """Stands in for :py:class:`MultiProgress` when progress bars are disabled"""

    def __enter__(self):
        return self

    def __exit__(self, *args):
        pass

    def start_job(self, name: str):
        pass

    def advance(self, advance: int = 1):
        pass


def get_multi_progress(
    totals: Dict[str, int], enabled: bool = True, task_description: str = 'Building'
) -> Union[MultiProgress, NullProgress]:
    return MultiProgress(totals, task_description) if enabled else NullProgress()


def get_progress(**kwargs) -> Progress:
    """Default progress bar format"""
    return Progress(
        '[progress.description]{task.description}',
        BarColumn(),
        '[green]{task.completed}/{task.total}',
        '[progress.percentage]{task.percentage:>3.0f}%',
        TimeRemainingColumn(),
        **kwargs,
    )
