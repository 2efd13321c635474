"""
Logging setup shared by the CLI and the experiment harness.
"""
import logging
import sys

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s %(message)s"


def setup_logging(level: str = "INFO"):
    """Configure the root logger once; library modules only call getLogger."""
    root = logging.getLogger()
    if root.handlers:
        root.setLevel(level)
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%H:%M:%S"))
    root.addHandler(handler)
    root.setLevel(level)


def progress_enabled() -> bool:
    """tqdm bars are shown only when INFO messages would be."""
    return logging.getLogger().isEnabledFor(logging.INFO)
