"""
Logging setup: rich console handler on stderr, level from CHUNKRELAY_LOG.
"""

from __future__ import annotations

import logging
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

from src.config import LOG_LEVEL
from src.errors import ConfigError

TRACE = 5
logging.addLevelName(TRACE, "TRACE")

LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
    "trace": TRACE,
}

stderr_console = Console(stderr=True)


def resolve_level(name: Optional[str]) -> int:
    key = (name or "info").strip().lower()
    if key not in LEVELS:
        raise ConfigError(f"Unknown log level {name!r}; expected one of {', '.join(LEVELS)}")
    return LEVELS[key]


def configure_logging(level: Optional[str] = None) -> None:
    """Install a single RichHandler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    handler = RichHandler(console=stderr_console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(resolve_level(level or LOG_LEVEL))
