import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Optional

from .config import DATA_DIR_DEFAULT

MB = 1024 * 1024


def _rotating(path: str, max_mb: int, backups: int, fmt: str) -> RotatingFileHandler:
    handler = RotatingFileHandler(path, maxBytes=max_mb * MB, backupCount=backups)
    handler.setFormatter(logging.Formatter(fmt))
    return handler


class PS2Logger:
    """Log sinks for a ps2kit process.

    ps2kit.log collects everything from the package, train.log keeps the
    training timeline (phase switches, epoch ends, checkpoint writes) and
    performance.log the wall-clock timings of renders, runs and evaluations.
    """

    def __init__(self, log_dir: Optional[str] = None):
        self.log_dir = log_dir or os.environ.get("PS2KIT_LOG_DIR") or os.path.join(DATA_DIR_DEFAULT, "logs")
        os.makedirs(self.log_dir, exist_ok=True)

        self.main_logger = logging.getLogger("ps2kit")
        self.main_logger.setLevel(logging.INFO)

        # child of the main logger, so timeline entries also reach ps2kit.log
        self.train_logger = logging.getLogger("ps2kit.train")
        self.train_logger.setLevel(logging.INFO)

        self.perf_logger = logging.getLogger("ps2kit.performance")
        self.perf_logger.setLevel(logging.INFO)
        self.perf_logger.propagate = False

        if not self.main_logger.handlers:
            self._setup_handlers()

    def _setup_handlers(self):
        self.main_logger.addHandler(_rotating(
            os.path.join(self.log_dir, "ps2kit.log"), 10, 5,
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        self.train_logger.addHandler(_rotating(
            os.path.join(self.log_dir, "train.log"), 5, 10,
            '%(asctime)s - TRAIN - %(levelname)s - %(message)s'))
        self.perf_logger.addHandler(_rotating(
            os.path.join(self.log_dir, "performance.log"), 5, 3,
            '%(asctime)s - PERF - %(levelname)s - %(message)s'))

        # warnings and failures also go to the terminal
        console = logging.StreamHandler()
        console.setLevel(logging.WARNING)
        console.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
        self.main_logger.addHandler(console)

    def debug(self, message: str, **kwargs):
        self.main_logger.debug(message, extra=kwargs)

    def info(self, message: str, **kwargs):
        self.main_logger.info(message, extra=kwargs)

    def warning(self, message: str, **kwargs):
        self.main_logger.warning(message, extra=kwargs)

    def error(self, message: str, **kwargs):
        self.main_logger.error(message, extra=kwargs)

    def train_event(self, iteration: int, details: str, **kwargs):
        """Timeline entry at a given iteration, e.g. end of warm-up or of an epoch."""
        self.train_logger.info(f"iter {iteration}: {details}", extra=kwargs)

    def checkpoint_event(self, path: str, epoch: int, iteration: int, **kwargs):
        """Record a checkpoint archive written to path."""
        self.train_logger.info(f"checkpoint epoch {epoch} iter {iteration} -> {path}", extra=kwargs)

    def performance(self, operation: str, duration_ms: float, **kwargs):
        """Wall-clock duration of one operation (render, train, evaluate)."""
        self.perf_logger.info(f"{operation} took {duration_ms:.2f}ms", extra=kwargs)


logger = PS2Logger()
