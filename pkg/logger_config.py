# logger_config.py
import logging
import os
import sys

LOGGER_NAME = "g5_logger"


def setup_logger(level: str | None = None) -> logging.Logger:
    """Logger central del toolkit. Va a stderr: stdout queda para tablas y CSV del CLI."""
    logger = logging.getLogger(LOGGER_NAME)
    level_name = (level or os.getenv("G5_LOG_LEVEL", "INFO")).strip().upper()
    logger.setLevel(getattr(logging, level_name, logging.INFO))
    if logger.handlers:
        return logger

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S"))
    logger.addHandler(handler)
    # los eventos estructurados de `diagnostics` salen por el mismo handler
    diag = logging.getLogger("diagnostics")
    if not diag.handlers:
        diag.addHandler(handler)
        diag.setLevel(logger.level)
    return logger


logger = setup_logger()
