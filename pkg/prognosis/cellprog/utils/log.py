"""
Process-wide logging setup: the plain LOG_FORMAT layout by default, or
one JSON object per record through python-json-logger.
"""
import logging
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

from ..config import LOG_FORMAT, LOG_JSON, LOG_LEVEL


def configure_logging(level: Optional[str] = None, json_format: Optional[bool] = None) -> logging.Logger:
    """(Re)configure the root logger; safe to call more than once"""
    level = (level or LOG_LEVEL).upper()
    json_format = LOG_JSON if json_format is None else json_format

    handler = logging.StreamHandler(sys.stderr)
    if json_format:
        handler.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level)
    # matplotlib's font manager is chatty at DEBUG
    logging.getLogger("matplotlib").setLevel(max(logging.getLevelName(level), logging.INFO))
    return root
