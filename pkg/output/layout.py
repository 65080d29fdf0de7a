from dataclasses import dataclass
from pathlib import Path
from typing import List, Union
import logging
import shutil

from core.errors import ConfigError
from .checkpoint import checkpoint_name

logger = logging.getLogger(__name__)


@dataclass
class RunLayout:
    """
    Fixed layout of a run directory:

        config.ini, checkpoints/, logs/ (train_log.csv, eval_log.csv, routing/),
        reports/, plots/, error.json on failure.
    """
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def config_path(self) -> Path:
        return self.root / "config.ini"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def routing(self) -> Path:
        return self.logs / "routing"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def train_log(self) -> Path:
        return self.logs / "train_log.csv"

    @property
    def eval_log(self) -> Path:
        return self.logs / "eval_log.csv"

    @property
    def error_report(self) -> Path:
        return self.root / "error.json"

    def checkpoint(self, step: int) -> Path:
        return self.checkpoints / checkpoint_name(step)

    def diagnostic_checkpoint(self, step: int) -> Path:
        return self.checkpoints / checkpoint_name(step, prefix="diagnostic_step")

    def routing_log(self, step: int) -> Path:
        return self.routing / f"step_{step:06d}.jsonl.gz"

    def routing_logs(self) -> List[Path]:
        return sorted(self.routing.glob("step_*.jsonl*"))

    def report(self, name: str) -> Path:
        return self.reports / name

    def plot(self, name: str) -> Path:
        return self.plots / name

    def claim(self, force: bool = False) -> "RunLayout":
        """Create the root; a non-empty root is refused unless force."""
        if self.root.exists() and any(self.root.iterdir()):
            if not force:
                raise ConfigError(f"output directory {self.root} is not empty (use --force to overwrite)")
            logger.warning("overwriting existing run directory %s", self.root)
            shutil.rmtree(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def prepare(self, force: bool = False) -> "RunLayout":
        """claim() plus the full run directory tree."""
        self.claim(force)
        for directory in (self.checkpoints, self.routing, self.reports, self.plots):
            directory.mkdir(parents=True, exist_ok=True)
        return self
