"""Logging utility for the adaptive MRAG engine."""

import logging
import sys
from pathlib import Path
from typing import Optional

import structlog

from .config_loader import get_config_section

DEFAULT_LOG_CONFIG = {
    'level': 'INFO',
    'format': '%(message)s',
    'file_path': 'logs/mrag.log',
}


def setup_logging(config_override: Optional[dict] = None) -> structlog.stdlib.BoundLogger:
    """Setup structured logging for the application.

    Args:
        config_override: Optional logging configuration override.

    Returns:
        Configured logger instance.
    """
    if config_override is not None:
        log_config = {**DEFAULT_LOG_CONFIG, **config_override}
    else:
        try:
            log_config = {**DEFAULT_LOG_CONFIG, **get_config_section('logging')}
        except KeyError:
            log_config = dict(DEFAULT_LOG_CONFIG)

    handlers: list = [logging.StreamHandler(sys.stderr)]
    file_path = log_config.get('file_path')
    if file_path:
        log_file_path = Path(file_path)
        log_file_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file_path, encoding='utf-8'))

    log_level = getattr(logging, str(log_config['level']).upper(), logging.INFO)

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="ISO"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer()
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    # stdout carries command output, so log records go to stderr and the file
    logging.basicConfig(
        format=log_config['format'],
        level=log_level,
        handlers=handlers,
        force=True,
    )

    logger = structlog.get_logger("mrag")
    logger.debug("Logging configured", level=log_config['level'], file=file_path)

    return logger


def get_logger(name: str = "mrag") -> structlog.stdlib.BoundLogger:
    """Get a logger instance with the specified name."""
    return structlog.get_logger(name)


class LoggerMixin:
    """Mixin class to add logging capabilities to other classes."""

    @property
    def logger(self) -> structlog.stdlib.BoundLogger:
        """Get logger instance for this class."""
        if not hasattr(self, '_logger'):
            self._logger = get_logger(self.__class__.__name__)
        return self._logger
