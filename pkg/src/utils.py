"""Logging and utility functions"""
import logging
import math
import os
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

import colorlog
import numpy as np

from src.config import LOG_FILE, LOG_LEVEL

T = TypeVar("T")

# Rows per chunk in the deterministic reductions
CHUNK_SIZE = 4096


class FairLogger:

    def __init__(self, log_file: Optional[str] = LOG_FILE):
        self.log_file = Path(log_file) if log_file else None
        self._setup_logger()

    def _setup_logger(self):
        self.logger = logging.getLogger("fair_calibration")
        self.logger.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))
        self.logger.propagate = False

        if self.logger.handlers:
            return

        # Console handler
        console_handler = colorlog.StreamHandler()
        console_handler.setFormatter(colorlog.ColoredFormatter(
            '%(log_color)s%(asctime)s - %(levelname)s%(reset)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        self.logger.addHandler(console_handler)

        # File handler, only when a log file is configured
        if self.log_file is not None:
            self.log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(self.log_file, mode='a', encoding='utf-8')
            file_handler.setFormatter(logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            ))
            self.logger.addHandler(file_handler)

    def info(self, message: str):
        self.logger.info(message)

    def error(self, message: str):
        self.logger.error(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def debug(self, message: str):
        self.logger.debug(message)

    def section(self, title: str):
        separator = "=" * 80
        self.logger.info(separator)
        self.logger.info(f" {title}")
        self.logger.info(separator)

    def write_header(self, command: str):
        self.section(f"FAIR CALIBRATION - {command} - {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named stage of a seeded run."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return np.random.default_rng(sequence)


def chunk_slices(n: int, chunk_size: int = CHUNK_SIZE) -> List[slice]:
    return [slice(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


def ordered_map(func: Callable[[T], float], items: Sequence[T], n_jobs: int = 1) -> List[float]:
    """Map preserving input order, optionally on a thread pool."""
    if n_jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(func, items))


def exact_sum(partials: Iterable[float]) -> float:
    # fsum is correctly rounded, so the result is independent of chunking order
    return math.fsum(partials)


def atomic_write_text(path: Path, text: str):
    """Write text through a temporary file renamed over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def format_float(value: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(value))


# Global logger instance
logger = FairLogger()
