"""
Logging utility for the pipeline.

Records go to stderr as structured lines so that stdout stays reserved
for JSON-lines data.
"""
import logging
import os
import sys
from datetime import datetime
from typing import Dict, Optional

LOG_FORMAT = 'level=%(levelname)s module=%(name)s msg=%(message)s'

# Loggers created through setup_logger, re-levelled by configure_logging
_LOGGERS: Dict[str, logging.Logger] = {}
_current_level = logging.INFO
_log_file: Optional[str] = None


def _build_handlers(level):
    formatter = logging.Formatter(LOG_FORMAT)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    handlers = [console_handler]

    if _log_file:
        file_handler = logging.FileHandler(_log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)

    return handlers


def setup_logger(name, level=None):
    """
    Set up a logger with the given name and level.

    Args:
        name: Logger name (usually the module name)
        level: Logging level; defaults to the level set by configure_logging

    Returns:
        Logger instance
    """
    level = _current_level if level is None else level

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Remove existing handlers
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)

    for handler in _build_handlers(level):
        logger.addHandler(handler)

    _LOGGERS[name] = logger
    return logger


def configure_logging(level='INFO', log_to_file=False, log_dir='logs'):
    """
    Re-level every logger created so far and optionally add a log file.

    Args:
        level: Level name or number
        log_to_file: Also write records to ``<log_dir>/pipeline_<date>.log``
        log_dir: Directory for the log file
    """
    global _current_level, _log_file

    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            raise ValueError(f"Unknown log level: {level}")
    _current_level = level

    if log_to_file:
        os.makedirs(log_dir, exist_ok=True)
        _log_file = os.path.join(log_dir, f"pipeline_{datetime.now().strftime('%Y%m%d')}.log")
    else:
        _log_file = None

    for name in list(_LOGGERS):
        setup_logger(name, level)
