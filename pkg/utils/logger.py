"""Structured logging for the navigation estimators and harness."""

import logging
import sys

ROOT_NAME = "tskfnav"

_configured = False


def get_logger(name: str = ROOT_NAME) -> logging.Logger:
    """Return a child logger of the package root with consistent formatting."""
    global _configured
    root = logging.getLogger(ROOT_NAME)

    if not _configured:
        root.setLevel(logging.DEBUG)
        handler = logging.StreamHandler(sys.stdout)
        handler.setLevel(logging.DEBUG)
        fmt = logging.Formatter(
            "[%(asctime)s] %(levelname)-7s %(name)s | %(message)s",
            datefmt="%H:%M:%S",
        )
        handler.setFormatter(fmt)
        root.addHandler(handler)
        root.propagate = False
        _configured = True

    if name == ROOT_NAME:
        return root
    return root.getChild(name)


def set_level(level: str | int) -> None:
    """Change the verbosity of every package logger at once."""
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            raise ValueError(f"Unknown log level: {level}")
        level = resolved
    root = get_logger()
    root.setLevel(level)
    for handler in root.handlers:
        handler.setLevel(level)
