"""
Logging configuration for the application.

Sets up structured (JSON) logging and provides a function to configure it.
"""
import json
import logging
import os
import sys

# Attributes every LogRecord carries; anything else was passed through `extra=`.
_RESERVED = set(logging.LogRecord("", 0, "", 0, "", None, None).__dict__) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    """
    Formats log records as JSON strings.

    Fields passed with `extra={...}` (stage, epoch, image_id, ...) are merged
    into the emitted object.
    """
    def format(self, record):
        log_record = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "name": record.name,
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                log_record[key] = value
        if record.exc_info:
            log_record['exc_info'] = self.formatException(record.exc_info)

        return json.dumps(log_record, default=str)


def setup_logging():
    """
    Configures the root logger for the application.

    Records go to stderr; stdout is reserved for the CLI summary line.
    """
    log_level = os.environ.get("LOG_LEVEL", "INFO").upper()

    logger = logging.getLogger()
    logger.setLevel(log_level)

    if logger.hasHandlers():
        logger.handlers.clear()

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    logger.addHandler(handler)
